import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcurv import autodiff as ad
from mtcurv import curvature as cv
from mtcurv.autodiff import ParamSet
from mtcurv.data import PreparedData, SplitSpec, TargetStats, prepare, synth_generate
from mtcurv.graphs import Multigraph
from mtcurv.model import GnConfig, init_params
from mtcurv.train import (
    NumericalError,
    OptimizerState,
    TrainConfig,
    adamw_step,
    build_model_config,
    curvature_snapshot,
    default_snapshot_epochs,
    density_document,
    evaluate_mae,
    load_checkpoint,
    lr_at,
    read_density_json,
    read_trace_csv,
    save_checkpoint,
    snapshot_from_losses,
    standardized_mae,
    train,
    write_density_json,
    write_trace_csv,
    zero_predictor_mae,
)

TINY_MODEL = {"latent_dim": 4, "steps": 2, "edge_hidden": 5, "node_hidden": 6, "global_hidden": 7,
              "head_hidden": [3]}


def tiny_run_config(**kw):
    base = dict(epochs=2, batch_size=8, model=TINY_MODEL, trace_probes=6, lanczos_iters=5, slq_runs=2,
                curvature_eval_size=4, grid_points=64)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def prepared():
    return prepare(synth_generate(24, seed=3), SplitSpec(0.7, seed=0))


# ---------------------------------------------------------------- schedule


def test_lr_examples():
    assert lr_at(0) == 1e-3
    assert lr_at(256) == 1e-3
    assert lr_at(258) == pytest.approx(9.94009e-4, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1)


@given(st.integers(0, 2000), st.integers(0, 2000))
@settings(max_examples=100, deadline=None)
def test_lr_is_nonincreasing(a, b):
    lo, hi = sorted((a, b))
    assert lr_at(hi) <= lr_at(lo)


def test_default_snapshots():
    assert default_snapshot_epochs(10) == [0, 1, 2, 4, 8, 10]
    assert default_snapshot_epochs(8) == [0, 1, 2, 4, 8]
    assert TrainConfig(epochs=3).snapshots() == [0, 1, 2, 3]
    assert TrainConfig(epochs=3, snapshot_epochs=[3, 0, 3]).snapshots() == [0, 3]


# ---------------------------------------------------------------- optimizer


def one_param(value):
    return ParamSet([("shared/w", np.array([value], dtype=float))])


def test_adamw_zero_gradient_no_decay_is_identity():
    p = ParamSet([("shared/w", np.array([0.3, -1.2])), ("task0/b", np.array([2.0]))])
    cfg = TrainConfig(weight_decay=0.0)
    new, state = adamw_step(p, {"shared/w": np.zeros(2), "task0/b": np.zeros(1)},
                            OptimizerState.zeros_like(p), 1e-3, cfg)
    assert new == p and state.step == 1


def test_adamw_first_step_closed_form():
    cfg = TrainConfig(weight_decay=0.0)
    new, _ = adamw_step(one_param(0.0), {"shared/w": np.array([1.0])},
                        OptimizerState.zeros_like(one_param(0.0)), 1e-3, cfg)
    assert new["shared/w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-15)
    assert new["shared/w"][0] == pytest.approx(-9.99999990e-4, rel=1e-9)


def test_adamw_decoupled_decay_only():
    cfg = TrainConfig(weight_decay=1e-4)
    new, _ = adamw_step(one_param(1.0), {"shared/w": np.array([0.0])},
                        OptimizerState.zeros_like(one_param(1.0)), 1e-3, cfg)
    assert new["shared/w"][0] == 1.0 - 1e-3 * 1e-4


def test_adamw_does_not_mutate_and_rejects_bad_shape():
    p = one_param(0.5)
    state = OptimizerState.zeros_like(p)
    adamw_step(p, {"shared/w": np.array([2.0])}, state, 1e-2)
    assert p["shared/w"][0] == 0.5 and state.step == 0 and state.m["shared/w"][0] == 0.0
    with pytest.raises(ValueError):
        adamw_step(p, {"shared/w": np.ones(2)}, state, 1e-2)


def test_adamw_minimizes_a_quadratic():
    p = one_param(3.0)
    state = OptimizerState.zeros_like(p)
    for _ in range(2000):
        p, state = adamw_step(p, {"shared/w": p["shared/w"]}, state, 1e-2, TrainConfig(weight_decay=0.0))
    assert abs(p["shared/w"][0]) < 1e-2


# ---------------------------------------------------------------- metrics


def test_standardized_mae_examples():
    z = np.array([[0.5, -1.0], [1.5, 2.0]])
    np.testing.assert_array_equal(standardized_mae(z, z), [0.0, 0.0])
    np.testing.assert_array_equal(standardized_mae(np.zeros_like(z), z), np.mean(np.abs(z), axis=0))
    assert standardized_mae([[0.7]], [[1.0]])[0] == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        standardized_mae(np.zeros((2, 1)), np.zeros((2, 2)))


def test_evaluate_mae_zero_model_matches_baseline():
    graphs = synth_generate(10, seed=0)
    config = GnConfig(node_dim=8, edge_dim=4, num_tasks=3, latent_dim=4, steps=1, edge_hidden=4,
                      node_hidden=4, global_hidden=4, head_hidden=(2,))
    params = init_params(config, 0)
    zero = params.replace({n: np.zeros_like(a) for n, a in params.items() if n.startswith("task")})
    mae, mse = evaluate_mae(graphs, zero, config)
    targets = np.stack([g.targets for g in graphs])
    np.testing.assert_allclose(mae, np.mean(np.abs(targets), axis=0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(mse, np.mean(targets ** 2, axis=0), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(zero_predictor_mae(graphs), np.mean(np.abs(targets), axis=0))


# ---------------------------------------------------------------- config


def test_config_validation():
    for bad in ({"epochs": 0}, {"lr0": 0.0}, {"decay_rate": -1.0}, {"beta1": 1.0},
                {"snapshot_epochs": [5], "epochs": 3}, {"model": {"width": 3}}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_config_json_roundtrip_and_unknown_keys(tmp_path):
    cfg = tiny_run_config(snapshot_epochs=[0, 2])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(path) == cfg
    path.write_text(json.dumps({"epochs": 3, "learning_rate": 1.0}))
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig.from_json(path)


# ---------------------------------------------------------------- artifacts


def test_checkpoint_roundtrip(tmp_path, tiny_config, tiny_params):
    stats = TargetStats(np.array([0.1, 2.0]), np.array([1.5, 0.25]))
    cfg = tiny_run_config()
    save_checkpoint(tmp_path / "ck.json", tiny_params, cfg, tiny_config, stats, 7)
    params, cfg2, model2, stats2, epoch = load_checkpoint(tmp_path / "ck.json")
    assert params == tiny_params and list(params) == list(tiny_params)
    assert cfg2 == cfg and model2 == tiny_config and epoch == 7
    np.testing.assert_array_equal(stats2.mean, stats.mean)
    doc = json.loads((tmp_path / "ck.json").read_text())
    doc["format_version"] = "other"
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")


def test_trace_csv_roundtrip(tmp_path):
    rows = [{"epoch": 4, "task_label": "task0", "trace_mean": 0.1 + 0.2, "trace_stderr": 1e-17,
             "n_samples": 500},
            {"epoch": 4, "task_label": "total", "trace_mean": -3.25, "trace_stderr": 0.0, "n_samples": 1}]
    write_trace_csv(rows, tmp_path / "t.csv")
    assert read_trace_csv(tmp_path / "t.csv") == rows


def test_density_document_roundtrip_and_schema(tmp_path):
    op = cv.matrix_operator(np.diag([1.0, 2.0, 5.0]))
    dens = cv.slq_density(op, 3, runs=2, grid_points=32, seed=0)
    doc = density_document(3, "task1", dens)
    write_density_json(doc, tmp_path / "d.json")
    back = read_density_json(tmp_path / "d.json")
    assert back == doc
    np.testing.assert_array_equal(np.asarray(back["density"]), dens.density)
    doc["extra"] = 1
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        read_density_json(tmp_path / "bad.json")


# ---------------------------------------------------------------- curvature snapshots


def test_quadratic_toy_trace_matches_dense(rng):
    b = rng.standard_normal((20, 20))
    a = (b + b.T) / 2 + 5 * np.eye(20)
    params = ParamSet([("shared/w", rng.standard_normal(20))])

    def losses(p):
        row = ad.reshape(p["shared/w"], (1, 20))
        return [0.5 * ad.sum(ad.matmul(row, a) * row)]

    cfg = TrainConfig(trace_probes=500, lanczos_iters=20, slq_runs=3, grid_points=128)
    rows, docs = snapshot_from_losses(losses, params, ["toy"], 0, cfg, {"toy": lambda p: losses(p)[0]})
    (row,) = rows
    assert row["n_samples"] == 500
    assert abs(row["trace_mean"] - np.trace(a)) <= 3 * row["trace_stderr"]
    # full Krylov space: every run reproduces the spectrum
    exact = np.linalg.eigvalsh(a)
    values = sorted({round(r["value"], 6) for r in docs[0]["ritz"]})
    np.testing.assert_allclose(values, np.round(exact, 6), atol=1e-6)


def test_snapshot_rows_per_task_and_repeatable(prepared):
    cfg = tiny_run_config()
    g = prepared.train[0]
    model = build_model_config(cfg, g.node_dim, g.edge_dim, g.num_targets)
    params = init_params(model, 0)
    graphs = prepared.train[:4]
    rows, docs = curvature_snapshot(params, graphs, 3, cfg, model)
    assert [r["task_label"] for r in rows] == ["task0", "task1", "task2", "total"]
    assert [d["task_label"] for d in docs] == ["task0", "task1", "task2"]
    again = curvature_snapshot(params, graphs, 3, cfg, model)
    assert again == (rows, docs)
    total = rows[-1]["trace_mean"]
    parts = [r["trace_mean"] for r in rows[:-1]]
    assert abs(sum(parts) - total) <= 1e-8 * max(abs(total), sum(map(abs, parts)))
    for d in docs:
        grid, dens = np.asarray(d["grid"]), np.asarray(d["density"])
        assert abs(np.trapezoid(dens, grid) - 1.0) <= 1e-3


def test_snapshot_rejects_nonfinite_curvature():
    params = ParamSet([("shared/w", np.ones(3))])
    cfg = TrainConfig(trace_probes=2, lanczos_iters=2, slq_runs=1)

    def losses(p):
        return [ad.sum(p["shared/w"] * p["shared/w"]) * np.inf]

    with pytest.raises((NumericalError, FloatingPointError)):
        snapshot_from_losses(losses, params, ["x"], 5, cfg)


# ---------------------------------------------------------------- training loop


def test_train_without_snapshots_writes_metrics_only(tmp_path, prepared):
    art = train(tiny_run_config(snapshot_epochs=[]), prepared, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["metrics.csv"]
    assert art.trace_csv is None and art.density_paths == [] and art.checkpoint_paths == []
    lines = art.metrics_csv.read_text().splitlines()
    assert lines[0] == "epoch,split,task_label,standardized_mae,loss"
    # epochs 0..2, two splits, three tasks
    assert len(lines) == 1 + 3 * 2 * 3


def test_train_is_deterministic_and_writes_snapshots(tmp_path, prepared):
    cfg = tiny_run_config(snapshot_epochs=[0, 2])
    a = train(cfg, prepared, tmp_path / "a")
    b = train(cfg, prepared, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_trace_csv(a.trace_csv)
    assert [r["epoch"] for r in rows] == [0] * 4 + [2] * 4
    assert len(a.density_paths) == 6 and len(b.checkpoint_paths) == 2
    params, _, _, _, epoch = load_checkpoint(a.checkpoint_paths[-1])
    assert epoch == 2
    assert not any(p.suffix == ".tmp" for p in (tmp_path / "a").iterdir())


def test_train_changes_with_shuffle_seed(tmp_path, prepared):
    a = train(tiny_run_config(snapshot_epochs=[]), prepared, tmp_path / "a")
    b = train(tiny_run_config(snapshot_epochs=[], shuffle_seed=99), prepared, tmp_path / "b")
    assert a.metrics_csv.read_text() != b.metrics_csv.read_text()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_reports_nonfinite_loss(tmp_path):
    # finite target whose squared error overflows
    bad = Multigraph([[1.0, 0.0]], [], [], [], np.zeros((0, 1)), [1e200, 1.0], "huge")
    ok = Multigraph([[0.0, 1.0]], [], [], [], np.zeros((0, 1)), [1.0, 0.0], "ok")
    data = PreparedData([bad, ok], [ok], TargetStats(np.zeros(2), np.ones(2)))
    cfg = tiny_run_config(snapshot_epochs=[])
    with pytest.raises(NumericalError, match="epoch 1, batch 0"):
        train(cfg, data, tmp_path)
