"""Optimizer, loss, EMA, and training-loop tests."""

import numpy as np
import pytest

from cpcad import numerics as nm
from cpcad import training as tr
from cpcad.config import default_config
from cpcad.errors import ContractError
from cpcad.network import checkpoint_bytes
from cpcad.pointcloud import PointCloud, normalize, save_xyz_bin


def small_config(**train_overrides):
    cfg = default_config()
    cfg.model.latent_dim = 8
    cfg.train.points_per_cloud = 40
    cfg.train.batch_size = 2
    cfg.train.steps = 12
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg


def sphere(rng, n=60):
    v = rng.normal(size=(n, 3))
    return normalize(PointCloud(v / np.linalg.norm(v, axis=1, keepdims=True)))


def write_dataset(tmp_path, n_clouds=3, seed=0):
    rng = np.random.default_rng(seed)
    train_dir = tmp_path / "data" / "train"
    train_dir.mkdir(parents=True)
    for i in range(n_clouds):
        save_xyz_bin(sphere(rng), train_dir / f"{i:03d}.xyzb")
    return tmp_path / "data"


def test_hybrid_loss_all_ones_example():
    cfg = default_config()
    x_raw = np.zeros((5, 3))
    y = nm.Tensor(np.ones((5, 3)))
    y_target = nm.Tensor(np.zeros((5, 3)))
    total, parts = tr.hybrid_loss(y, y_target, x_raw, t_n=1.0, cfg=cfg)
    assert parts["online"] == pytest.approx(3.0)
    assert parts["target"] == pytest.approx(0.0)
    assert parts["ct"] == pytest.approx(5.0 * 3.0)  # lambda(1) = 5
    assert total.item() == pytest.approx(18.0)


def test_loss_variants_compose():
    cfg = default_config()
    rng = np.random.default_rng(0)
    x_raw = rng.normal(size=(7, 3))
    y = nm.Tensor(rng.normal(size=(7, 3)))
    y_t = nm.Tensor(rng.normal(size=(7, 3)))
    parts = {}
    for variant in ("hybrid", "ct_online", "ct_target"):
        cfg.train.loss_variant = variant
        total, p = tr.hybrid_loss(y, y_t, x_raw, 2.0, cfg)
        parts[variant] = (total.item(), p)
    _, p = parts["hybrid"]
    assert parts["hybrid"][0] == pytest.approx(p["ct"] + p["online"] + p["target"])
    assert parts["ct_online"][0] == pytest.approx(p["ct"] + p["online"])
    assert parts["ct_target"][0] == pytest.approx(p["ct"] + p["target"])


def test_target_term_contributes_no_gradient():
    # gradients with loss_variant hybrid vs ct_online differ only via the
    # target reconstruction term, which is constant w.r.t. the online
    # parameters; with a shared stop-gradient target both must match
    cfg = small_config()
    rng = np.random.default_rng(1)
    cloud = sphere(rng)
    grads = {}
    for variant in ("hybrid", "ct_online"):
        cfg2 = small_config(loss_variant=variant)
        state = tr.init_state(cfg2)
        params = state.model.parameters("online")
        for p in params:
            p.zero_grad()
        state.rng = np.random.default_rng(7)  # same draws for both variants
        with nm.record():
            total, _, _ = tr._cloud_loss(state, cloud)
        nm.backward(total)
        grads[variant] = np.concatenate([p.grad.ravel() for p in params])
        for p in params:
            p.zero_grad()
    np.testing.assert_array_equal(grads["hybrid"], grads["ct_online"])


def test_ema_update_midpoint_example():
    from cpcad.network import ConsistencyModel

    model = ConsistencyModel(latent_dim=4, seed=0)
    po, pt = model.parameter_pairs()[0]
    po.value[...] = 2.0
    pt.value[...] = 0.0
    tr.ema_update(model, 0.5)
    assert pt.value[0, 0] == 1.0


def test_ema_update_bitwise_formula():
    from cpcad.network import ConsistencyModel

    model = ConsistencyModel(latent_dim=8, seed=3)
    rng = np.random.default_rng(2)
    for po, pt in model.parameter_pairs():
        po.value[...] = rng.normal(size=po.shape)
        pt.value[...] = rng.normal(size=pt.shape)
    mu = 0.9746794344808963
    expected = [mu * pt.value + (1.0 - mu) * po.value for po, pt in model.parameter_pairs()]
    tr.ema_update(model, mu)
    for (po, pt), want in zip(model.parameter_pairs(), expected):
        np.testing.assert_array_equal(pt.value, want)
    with pytest.raises(ContractError):
        tr.ema_update(model, 1.5)


def test_adam_single_step_known_value():
    p = nm.Parameter([[1.0]], "p")
    p.grad[...] = 0.5
    opt = tr.Adam(beta1=0.9, beta2=0.999, eps=1e-8)
    opt.step([p], lr=0.1)
    # bias-corrected m_hat = 0.5, v_hat = 0.25 -> step = lr * 0.5 / (0.5 + eps)
    assert p.value[0, 0] == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_training_step_moves_online_and_target():
    cfg = small_config()
    state = tr.init_state(cfg)
    before_online = [p.value.copy() for p in state.model.parameters("online")]
    before_target = [p.value.copy() for p in state.model.parameters("target")]
    rng = np.random.default_rng(3)
    parts = tr.training_step(state, [sphere(rng), sphere(rng)])
    assert np.isfinite(list(parts.values())).all()
    assert state.step == 1
    moved_online = any(
        not np.array_equal(b, p.value)
        for b, p in zip(before_online, state.model.parameters("online"))
    )
    moved_target = any(
        not np.array_equal(b, p.value)
        for b, p in zip(before_target, state.model.parameters("target"))
    )
    assert moved_online and moved_target
    # gradient buffers are cleared for the next step; target ones never fill
    assert all(np.abs(p.grad).max() == 0 for p in state.model.parameters("online"))
    assert all(np.abs(p.grad).max() == 0 for p in state.model.parameters("target"))


def test_full_objective_gradient_check():
    cfg = small_config()
    state = tr.init_state(cfg)
    rng = np.random.default_rng(4)
    cloud = sphere(rng)
    # take one set of draws off the stream, then freeze them
    _, _, draws = tr._cloud_loss(state, cloud)
    params = state.model.parameters("online")
    # wake the zero-init output layer so gradients reach every layer
    last = state.model.net.layers[-1]
    wake = np.random.default_rng(5)
    last.main_w.value[...] = wake.normal(size=last.main_w.shape) * 0.01
    last.bias_w.value[...] = wake.normal(size=last.bias_w.shape) * 0.01

    def loss_fn():
        total, _, _ = tr._cloud_loss(state, cloud, draws)
        return total

    err = nm.grad_check(loss_fn, params, np.random.default_rng(6), samples=60)
    assert err < 1e-4


def test_train_runs_and_is_deterministic(tmp_path):
    data = write_dataset(tmp_path)
    cfg = small_config()
    state_a = tr.train(cfg, data, tmp_path / "run_a")
    state_b = tr.train(small_config(), data, tmp_path / "run_b")
    assert (tmp_path / "run_a" / "checkpoint.cmad").read_bytes() == \
        (tmp_path / "run_b" / "checkpoint.cmad").read_bytes()
    metrics = (tmp_path / "run_a" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == tr.METRICS_HEADER
    assert len(metrics) == 1 + cfg.train.steps
    assert (tmp_path / "run_a" / "metrics.csv").read_text() == \
        (tmp_path / "run_b" / "metrics.csv").read_text()
    # loss stayed finite throughout
    for line in metrics[1:]:
        values = line.split(",")
        assert np.isfinite(float(values[4]))


def test_resume_matches_straight_run(tmp_path):
    data = write_dataset(tmp_path)

    # straight 12-step run
    straight = tr.train(small_config(), data, tmp_path / "straight")

    # pause the same 12-step run at 8, serialize, reload, finish
    partial = tr.train(small_config(), data, tmp_path / "partial", stop_after=8)
    tr.save_state(partial, tmp_path / "state.cmst")
    resumed = tr.load_state(tmp_path / "state.cmst")
    tr.train(resumed.config, data, tmp_path / "resumed", state=resumed)

    assert checkpoint_bytes(resumed.model) == checkpoint_bytes(straight.model)
    assert resumed.step == straight.step == 12


def test_metrics_schema_columns(tmp_path):
    data = write_dataset(tmp_path)
    cfg = small_config(steps=3)
    tr.train(cfg, data, tmp_path / "run")
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header == ["step", "lr", "n_k", "mu_k", "loss_total", "loss_ct",
                      "loss_online", "loss_target"]
    first = lines[1].split(",")
    assert first[0] == "0"
    assert int(first[2]) == 2  # N(0) = s0
    assert float(first[3]) == pytest.approx(0.95)  # mu collapses to mu0
