import csv
import io
import itertools
from dataclasses import replace

import numpy as np
import pytest

from sealpose import autodiff as ad
from sealpose import trainer
from sealpose.errors import ContractError, NumericError
from sealpose.lossnet import LossNetConfig, init_lossnet, lossnet_energy
from sealpose.metrics import fmt
from sealpose.objectives import ObjectiveConfig, lossnet_objective, task_loss
from sealpose.optim import AdamState, adam_step
from sealpose.posenet import PoseNetConfig, init_posenet, posenet_forward
from sealpose.preprocessing import PoseScaler
from sealpose.synthdata import GeneratorConfig, make_dataset
from sealpose.trainer import (
    HISTORY_COLUMNS,
    SWEEP_COLUMNS,
    TrainConfig,
    TrainingAborted,
    TrainState,
    greedy_sweep,
    train_run,
    train_step,
)

POSENET = PoseNetConfig(32, 1, seed=3)
LOSSNET = LossNetConfig(d_embed=8, d_model=8, heads=2, depth=1, mlp_hidden=16, mlp_blocks=1, seed=3)


@pytest.fixture(scope="module")
def data():
    return make_dataset(GeneratorConfig(n_samples=96, seed=21))


@pytest.fixture(scope="module")
def val_data():
    return make_dataset(GeneratorConfig(n_samples=32, seed=22))


def run(data, spec, val=None, **kw):
    cfg = TrainConfig(epochs=kw.pop("epochs", 2), batch_size=32, **kw)
    return train_run(data, val, cfg, spec, POSENET, LOSSNET)


def supervised_reference(data, spec, lr_p, epochs, batch_size, seed):
    """Plain mini-batch Adam on the MSE, written independently of the trainer."""
    scaler = PoseScaler().fit(data.x)
    x, y = scaler.transform(data.x), scaler.pose_to_units(data.y)
    params = init_posenet(spec.n_joints, POSENET)
    state = AdamState.for_params(params)
    shuffle = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    for _ in range(epochs):
        perm = shuffle.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = perm[start : start + batch_size]
            nodes = params.nodes()
            diff = posenet_forward(nodes, x[idx]) - y[idx]
            loss = (diff * diff).mean(axis=-1).sum(axis=-1).mean()
            adam_step(params, ad.backward(loss, nodes), state, lr_p)
    return params


def test_baseline_equals_plain_supervised_training(data, spec):
    result = run(data, spec, baseline_mode=True, lr_p=1e-3, epochs=3, seed=5)
    ref = supervised_reference(data, spec, 1e-3, 3, 32, 5)
    assert result.state.posenet.equals(ref)
    assert np.all(np.isnan(result.history.column("L_E")))


def test_zero_alpha_leaves_the_posenet_on_the_baseline_path(data, spec):
    base = run(data, spec, baseline_mode=True, lr_p=1e-3, seed=1)
    seal = run(data, spec, lr_p=1e-3, lr_l=1e-3, seed=1, objective=ObjectiveConfig(alpha=0.0, K=2))
    assert seal.state.posenet.equals(base.state.posenet)
    # the loss-net was still trained
    assert not seal.state.lossnet.equals(init_lossnet(spec.n_joints, LOSSNET))
    assert np.all(np.isfinite(seal.history.column("L_E")))


def make_state(data, spec, config):
    scaler = PoseScaler().fit(data.x)
    state = TrainState.create(spec, scaler, config, POSENET, LOSSNET)
    return state, scaler.transform(data.x[:16]), scaler.pose_to_units(data.y[:16])


def test_step_updates_lossnet_first_then_posenet_against_it(data, spec):
    cfg = TrainConfig(lr_p=1e-3, lr_l=1e-2, objective=ObjectiveConfig(alpha=0.5))
    state, x, y = make_state(data, spec, cfg)
    phi, theta = state.posenet.copy(), state.lossnet.copy()
    train_step(state, x, y, cfg)

    # replay by hand
    y_tilde = posenet_forward(phi, x).value
    nodes = theta.nodes()
    loss_e, _ = lossnet_objective(nodes, LOSSNET, spec, x, y, y_tilde, cfg.objective)
    adam_step(theta, ad.backward(loss_e, nodes), AdamState.for_params(theta), cfg.lr_l)
    assert state.lossnet.equals(theta)
    nodes = phi.nodes()
    pred = posenet_forward(nodes, x)
    loss_f = task_loss(y, pred, lossnet_energy(theta, LOSSNET, x, pred, spec), 0.5)
    adam_step(phi, ad.backward(loss_f, nodes), AdamState.for_params(phi), cfg.lr_p)
    assert state.posenet.equals(phi)


def test_flipping_the_lossnet_gradient_changes_the_update(data, spec, monkeypatch):
    """Instrumentation check: the loss-net moves down its own objective, not up."""
    cfg = TrainConfig(lr_l=1e-6, objective=ObjectiveConfig(alpha=0.5))

    def objective_after(sign):
        state, x, y = make_state(data, spec, cfg)
        y_tilde = posenet_forward(state.posenet, x).value
        before = lossnet_objective(state.lossnet, LOSSNET, spec, x, y, y_tilde, cfg.objective)[0].value
        nodes = state.lossnet.nodes()
        loss_e, _ = lossnet_objective(nodes, LOSSNET, spec, x, y, y_tilde, cfg.objective)
        grads = {k: sign * g for k, g in ad.backward(loss_e, nodes).items()}
        adam_step(state.lossnet, grads, state.adam_l, cfg.lr_l)
        return before, lossnet_objective(state.lossnet, LOSSNET, spec, x, y, y_tilde, cfg.objective)[0].value

    before, down = objective_after(1.0)
    _, up = objective_after(-1.0)
    assert down < before < up

    # the trainer's own step agrees with the descending direction
    state, x, y = make_state(data, spec, cfg)
    theta = state.lossnet.copy()
    train_step(state, x, y, cfg)
    y_tilde = posenet_forward(init_posenet(spec.n_joints, POSENET), x).value
    after = lossnet_objective(state.lossnet, LOSSNET, spec, x, y, y_tilde, cfg.objective)[0].value
    assert after == pytest.approx(down, rel=1e-12)
    assert not state.lossnet.equals(theta)


def test_lossnet_objective_gives_posenet_no_gradient(data, spec):
    cfg = TrainConfig(objective=ObjectiveConfig(K=2))
    state, x, y = make_state(data, spec, cfg)
    phi = state.posenet.nodes()
    y_tilde = posenet_forward(phi, x)
    loss, _ = lossnet_objective(state.lossnet, LOSSNET, spec, x, y, y_tilde.value, cfg.objective, state.neg_rng, phi, state.scaler.scale_)
    grads = ad.backward(loss, phi)
    assert all(np.all(grads[k] == 0) for k in phi)


def test_training_is_deterministic(data, val_data, spec):
    kw = dict(lr_p=1e-3, seed=4, objective=ObjectiveConfig(K=2, window_w=2))
    a = run(data, spec, val_data, **kw)
    b = run(data, spec, val_data, **kw)
    assert a.state.posenet.equals(b.state.posenet) and a.state.lossnet.equals(b.state.lossnet)
    assert a.history.to_csv() == b.history.to_csv()
    c = run(data, spec, val_data, **dict(kw, seed=5))
    assert not a.state.posenet.equals(c.state.posenet)


def test_zero_epochs_returns_initial_weights(data, spec):
    result = run(data, spec, epochs=0)
    assert len(result.history) == 0
    assert result.state.posenet.equals(init_posenet(spec.n_joints, POSENET))
    assert result.best_posenet.equals(result.state.posenet)


def test_history_columns_and_best_epoch(data, val_data, spec, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=32, lr_p=1e-3)
    result = train_run(data, val_data, cfg, spec, POSENET, LOSSNET, out_dir=tmp_path)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    assert tuple(lines[1].split(",")) == HISTORY_COLUMNS
    assert len(lines) == 2 + 3
    vals = result.history.column("val_mpjpe")
    assert result.best_epoch == int(np.argmin(vals)) + 1
    assert result.best_val_mpjpe == vals.min()
    assert result.best_val_lse == result.history.column("val_lse")[result.best_epoch - 1]
    for name in ("posenet_final.bin", "posenet_best.bin", "lossnet_final.bin", "lossnet_best.bin", "scaler.json"):
        assert (tmp_path / name).exists()


def test_abort_keeps_partial_history(data, spec, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer, "ABORT_THRESHOLD", 1e-12)
    with pytest.raises(TrainingAborted) as info:
        train_run(data, None, TrainConfig(epochs=2, batch_size=32), spec, POSENET, LOSSNET, out_dir=tmp_path)
    assert info.value.record["term"] == "L_E"
    assert isinstance(info.value, NumericError)
    assert (tmp_path / "history.csv").exists() and (tmp_path / "posenet_final.bin").exists()


def test_training_rejects_bad_inputs(data, spec):
    with pytest.raises(ContractError):
        run(data.subset(np.array([], dtype=int)), spec)
    with pytest.raises(ContractError):
        TrainConfig(lr_p=0).check()
    with pytest.raises(ContractError):
        train_step(make_state(data, spec, TrainConfig())[0], np.zeros((0, 17, 2)), np.zeros((0, 17, 3)), TrainConfig())


# -- greedy sweep ---------------------------------------------------------------------------


def fake_score(cfg: TrainConfig) -> tuple[float, float]:
    """A deterministic stand-in for training with an interior optimum."""
    if cfg.baseline_mode:
        return 50.0 + 1e4 * abs(cfg.lr_p - 1e-3), 20.0
    value = 50.0 + 1e4 * abs(cfg.lr_p - 1e-3) + 1e3 * abs(cfg.lr_l - 1e-4) + 100 * abs(cfg.alpha - 5e-3) - 1.0
    return value, 19.0 + cfg.alpha


def greedy_oracle(grids):
    runs = {}

    def score(key):
        if key not in runs:
            lr_p, lr_l, alpha = key
            cfg = TrainConfig(lr_p=lr_p, lr_l=lr_l or 1e-4, objective=ObjectiveConfig(alpha=alpha), baseline_mode=lr_l is None)
            runs[key] = fake_score(cfg)[0]
        return runs[key]

    lr_p = min(grids["lr_p"], key=lambda v: score((v, None, 0.0)))
    lr_l, _ = min(itertools.product(grids["lr_l"], grids["alpha"]), key=lambda p: score((lr_p, *p)))
    alpha = min(grids["alpha"], key=lambda a: score((lr_p, lr_l, a)))
    return (lr_p, lr_l, alpha), len(runs)


def test_sweep_replays_the_greedy_search(data, spec):
    grids = {"lr_p": [1e-4, 1e-3], "lr_l": [1e-5, 1e-4], "alpha": [5e-3, 5e-2]}
    calls = []
    result = greedy_sweep(grids, data, data, TrainConfig(), spec, runner=lambda c: calls.append(c) or fake_score(c))
    best, n_runs = greedy_oracle(grids)
    assert (result.best.lr_p, result.best.lr_l, result.best.alpha) == best
    assert len(calls) == n_runs == 2 + 4
    assert [r.stage for r in result.rows] == [1] * 2 + [2] * 4 + [3] * 2
    assert all(r.lse == pytest.approx(20.0 if r.stage == 1 else 19.0 + r.alpha) for r in result.rows)


def test_sweep_with_singleton_grids(data, spec):
    grids = {"lr_p": [1e-3], "lr_l": [1e-4], "alpha": [5e-3]}
    result = greedy_sweep(grids, data, data, TrainConfig(), spec, runner=lambda c: fake_score(c)[0])
    assert len(result.rows) == 3
    assert result.best.lr_p == 1e-3 and not result.best.baseline_mode


def test_sweep_table_and_csv(data, spec):
    grids = {"lr_p": [1e-4, 1e-3], "lr_l": [1e-4], "alpha": [5e-3, 1.0]}

    def runner(cfg):
        if cfg.alpha == 1.0:
            raise NumericError("diverged")
        return fake_score(cfg)

    result = greedy_sweep(grids, data, data, TrainConfig(), spec, runner=runner)
    assert result.best.alpha == 5e-3
    text = result.to_csv()
    assert text.startswith("# config_digest=")
    rows = list(csv.reader(io.StringIO(text.split("\n", 1)[1])))
    assert tuple(rows[0]) == SWEEP_COLUMNS
    body = rows[1:]
    statuses = [r[-1] for r in body]
    assert statuses == sorted(statuses, key=lambda s: s != "ok")
    ok = [float(r[3]) for r in body if r[-1] == "ok"]
    assert ok == sorted(ok)
    assert all(r[1] == fmt(None) for r in body if r[5] == "1")


def test_sweep_rejects_empty_grid(data, spec):
    with pytest.raises(ContractError):
        greedy_sweep({"lr_p": [], "lr_l": [1e-4], "alpha": [1.0]}, data, data, TrainConfig(), spec)


def test_real_sweep_runs_end_to_end(data, val_data, spec):
    grids = {"lr_p": [1e-3], "lr_l": [1e-4], "alpha": [5e-3]}
    base = TrainConfig(epochs=1, batch_size=48)
    result = greedy_sweep(grids, data, val_data, base, spec, POSENET, LOSSNET)
    assert all(r.status == "ok" and np.isfinite(r.mpjpe) and np.isfinite(r.lse) for r in result.rows)
