"""Consistency training loop.

Each step, per cloud in the batch: subsample the normalized cloud, plant
one synthetic defect, encode the defective cloud with the online
encoder, pick an adjacent pair (t_n, t_{n+1}) from the current grid,
noise the defective cloud to t_n, push it to t_{n+1} with one
probability-flow Euler move, then ask the online net to denoise the
noisier copy and the frozen target net the less noisy one. The loss
couples the two answers (consistency term, weighted by lambda(t_n))
and anchors both to the clean subsample (reconstruction terms). After
the optimizer moves the online weights, the target follows by EMA with
the step-dependent decay.

RNG discipline: one generator drives the whole loop, consumed in a
fixed order (batch indices, then per cloud: subsample, defect pivot,
defect modulation, grid index, noise draw). Resuming from a saved state
replays the identical stream.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
import struct

import numpy as np

from . import numerics as nm
from . import schedule as sch
from .config import Config, digest, parse, serialize
from .errors import CheckpointError, ContractError, NumericalError
from .network import (ConsistencyModel, checkpoint_bytes, checkpoint_from_bytes,
                      save_checkpoint, _Reader)
from .patchgen import PatchGenConfig, patch_size_for, perturb
from .pointcloud import PointCloud, load, normalize, require_pipeline_size, subsample_uniform

METRICS_HEADER = "step,lr,n_k,mu_k,loss_total,loss_ct,loss_online,loss_target"

_STATE_MAGIC = b"CMST"
_STATE_VERSION = 1


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            m = self.m.setdefault(p.id, np.zeros_like(p.value))
            v = self.v.setdefault(p.id, np.zeros_like(p.value))
            m[...] = b1 * m + (1.0 - b1) * p.grad
            v[...] = b2 * v + (1.0 - b2) * p.grad * p.grad
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.value[...] = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ema_update(model: ConsistencyModel, mu: float) -> None:
    """target <- mu * target + (1 - mu) * online, elementwise."""
    if not 0.0 <= mu <= 1.0:
        raise ContractError(f"EMA decay must be in [0, 1], got {mu}")
    for po, pt in model.parameter_pairs():
        pt.value[...] = mu * pt.value + (1.0 - mu) * po.value


def hybrid_loss(y: nm.Tensor, y_target: nm.Tensor, x_raw: np.ndarray, t_n: float,
                cfg: Config) -> tuple[nm.Tensor, dict]:
    """Consistency + reconstruction objective for one cloud.

    ct     = lambda(t_n) * mean_i ||y_i - y_target_i||^2
    online = mean_i ||y_i - x_raw_i||^2
    target = mean_i ||y_target_i - x_raw_i||^2   (carries no gradient)

    The scalar depends on ``train.loss_variant``: the full objective is
    ct + lambda_hybrid * (online + target); the reduced variants keep
    only one reconstruction term. The target term never contributes
    gradient either way (y_target is a stop-gradient output), but it is
    always computed and logged.
    """
    n = y.shape[0]
    if y_target.shape != y.shape or x_raw.shape != y.shape:
        raise ContractError("loss operands must share one (N, 3) shape")
    lam_ct = sch.lambda_weight(t_n, cfg.model.sigma_data)
    lam_h = cfg.train.lambda_hybrid

    d = nm.sub(y, y_target)
    ct = nm.scale(nm.sum_all(nm.mul(d, d)), lam_ct / n)
    eo = nm.sub(y, x_raw)
    online = nm.scale(nm.sum_all(nm.mul(eo, eo)), 1.0 / n)
    et = nm.sub(y_target, x_raw)
    target = nm.scale(nm.sum_all(nm.mul(et, et)), 1.0 / n)

    variant = cfg.train.loss_variant
    if variant == "hybrid":
        total = nm.add(ct, nm.scale(nm.add(online, target), lam_h))
    elif variant == "ct_online":
        total = nm.add(ct, nm.scale(online, lam_h))
    elif variant == "ct_target":
        total = nm.add(ct, nm.scale(target, lam_h))
    else:
        raise ContractError(f"unknown loss variant {variant!r}")
    parts = {"ct": ct.item(), "online": online.item(), "target": target.item(),
             "total": total.item()}
    return total, parts


@dataclasses.dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    config: Config
    model: ConsistencyModel
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    loss_count: int = 0
    loss_sum: float = 0.0

    @property
    def adaptive(self) -> sch.AdaptiveSchedule:
        s = self.config.schedule
        return sch.AdaptiveSchedule(s0=s.s0, s1=s.s1, mu0=s.mu0,
                                    total_steps=self.config.train.steps,
                                    variant=s.nk_variant)

    def current_lr(self) -> float:
        t = self.config.train
        return sch.learning_rate(self.step, t.steps, t.lr_initial, t.lr_final,
                                 t.lr_warm_frac, t.lr_tail_frac)


def init_state(cfg: Config) -> TrainState:
    seeds = np.random.SeedSequence(cfg.train.seed).spawn(2)
    model = ConsistencyModel(
        latent_dim=cfg.model.latent_dim, sigma_data=cfg.model.sigma_data,
        eps=cfg.schedule.eps, seed=seeds[0],
    )
    t = cfg.train
    return TrainState(
        config=cfg, model=model,
        optimizer=Adam(t.adam_beta1, t.adam_beta2, t.adam_eps),
        rng=np.random.default_rng(seeds[1]),
    )


def _cloud_loss(state: TrainState, cloud: PointCloud, draws: dict | None = None):
    """Forward pass and loss graph for one cloud.

    ``draws`` lets a caller freeze the random choices (useful for
    gradient checking); normally they come off the state's generator
    in a fixed order.
    """
    cfg = state.config
    if draws is None:
        rng = state.rng
        pts_pc = subsample_uniform(cloud, min(cfg.train.points_per_cloud, len(cloud)), rng)
        pcfg = PatchGenConfig(
            scale=cfg.patchgen.scale,
            patch_size=patch_size_for(len(pts_pc), cfg.patchgen.patch_fraction),
            translation_sigma=cfg.patchgen.translation_sigma,
            mode=cfg.patchgen.mode,
        )
        defective, _ = perturb(pts_pc, pcfg, rng)
        n_k = sch.n_of_k(state.adaptive, state.step)
        n_idx = int(rng.integers(0, n_k - 1))
        noise = rng.standard_normal(pts_pc.points.shape)
        draws = {"clean": pts_pc.points, "defective": defective.points,
                 "n_k": n_k, "n_idx": n_idx, "noise": noise}

    s = cfg.schedule
    grid = sch.timesteps(sch.KarrasSchedule(eps=s.eps, t_max=s.t_max, rho=s.rho,
                                            n=draws["n_k"]))
    t_n, t_next = float(grid[draws["n_idx"]]), float(grid[draws["n_idx"] + 1])
    x_n = sch.add_noise(draws["defective"], t_n, draws["noise"])
    x_next = sch.euler_step(x_n, draws["defective"], t_n, t_next)

    c = state.model.encode(draws["defective"], which="online")
    y = state.model.forward(x_next, t_next, c, which="online")
    y_target = state.model.forward(x_n, t_n, c, which="target")
    total, parts = hybrid_loss(y, y_target, draws["clean"], t_n, cfg)
    return total, parts, draws


def training_step(state: TrainState, clouds) -> dict:
    """One optimization step over a batch of normalized clouds.

    Returns the batch-averaged loss breakdown. Raises NumericalError
    naming the step if anything non-finite shows up.
    """
    accum = {"ct": 0.0, "online": 0.0, "target": 0.0, "total": 0.0}
    try:
        with nm.record():
            totals = None
            for cloud in clouds:
                total, parts, _ = _cloud_loss(state, cloud)
                for key in accum:
                    accum[key] += parts[key]
                totals = total if totals is None else nm.add(totals, total)
            batch_loss = nm.scale(totals, 1.0 / len(clouds))
        nm.backward(batch_loss)
    except NumericalError as err:
        raise NumericalError(
            f"training step {state.step} diverged (lr={state.current_lr():.3g}): {err}"
        ) from None

    online = state.model.parameters("online")
    state.optimizer.step(online, state.current_lr())
    for p in online:
        p.zero_grad()
    ema_update(state.model, sch.mu_of_k(state.adaptive, state.step))
    state.step += 1

    out = {k: v / len(clouds) for k, v in accum.items()}
    state.loss_count += 1
    state.loss_sum += out["total"]
    return out


def load_training_clouds(data_dir) -> list[PointCloud]:
    """Sorted, normalized training clouds from ``data_dir/train``."""
    train_dir = pathlib.Path(data_dir) / "train"
    paths = sorted(list(train_dir.glob("*.xyz")) + list(train_dir.glob("*.xyzb")))
    if not paths:
        raise ContractError(f"no training clouds under {train_dir}")
    clouds = []
    for path in paths:
        cloud = load(path, label="clean")
        require_pipeline_size(cloud, f"training cloud {path.name}")
        clouds.append(normalize(cloud))
    return clouds


def train(cfg: Config, data_dir, out_dir, log_every: int = 500,
          state: TrainState | None = None, stop_after: int | None = None,
          logger=None) -> TrainState:
    """Run (or continue) a training run and write its artifacts.

    Writes ``checkpoint.cmad`` and ``metrics.csv`` into ``out_dir``,
    plus ``checkpoint_step<k>.cmad`` at the configured cadence.
    ``stop_after`` pauses the run at that step without shortening the
    configured horizon (the discretization and LR laws depend on the
    horizon, so a paused-and-resumed run must keep the original one).
    """
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clouds = load_training_clouds(data_dir)
    if state is None:
        state = init_state(cfg)
    cfg = state.config
    horizon = cfg.train.steps if stop_after is None else min(stop_after, cfg.train.steps)

    mode = "a" if state.step else "w"
    with open(out / "metrics.csv", mode, encoding="utf-8", newline="\n") as metrics:
        if not state.step:
            metrics.write(METRICS_HEADER + "\n")
        while state.step < horizon:
            k = state.step
            lr = state.current_lr()
            n_k = sch.n_of_k(state.adaptive, k)
            mu_k = sch.mu_of_k(state.adaptive, k)
            idx = state.rng.integers(0, len(clouds), size=cfg.train.batch_size)
            parts = training_step(state, [clouds[i] for i in idx])
            metrics.write(
                f"{k},{lr:.9e},{n_k},{mu_k:.9e},{parts['total']:.9e},"
                f"{parts['ct']:.9e},{parts['online']:.9e},{parts['target']:.9e}\n"
            )
            if logger and (k % log_every == 0 or k + 1 == cfg.train.steps):
                logger.info("step %d/%d lr %.3g N_k %d loss %.4g",
                            k, cfg.train.steps, lr, n_k, parts["total"])
            if cfg.train.checkpoint_every and state.step % cfg.train.checkpoint_every == 0 \
                    and state.step < cfg.train.steps:
                save_checkpoint(state.model, out / f"checkpoint_step{state.step}.cmad",
                                config_digest=digest(cfg))
    save_checkpoint(state.model, out / "checkpoint.cmad", config_digest=digest(cfg))
    return state


# ---------------------------------------------------------------------------
# state serialization (for exact resume)


def _write_array_block(chunks: list, arrays: dict[str, np.ndarray]) -> None:
    chunks.append(struct.pack("<I", len(arrays)))
    for key in sorted(arrays):
        ident = key.encode()
        arr = arrays[key]
        chunks.append(struct.pack("<I", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())


def _read_array_block(rd: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(rd.u32()):
        ident = rd.take(rd.u32()).decode()
        rows, cols = struct.unpack("<II", rd.take(8))
        out[ident] = np.frombuffer(rd.take(rows * cols * 8), dtype="<f8").reshape(rows, cols).copy()
    return out


def save_state(state: TrainState, path) -> None:
    """Serialize config, step, RNG state, optimizer moments, and weights."""
    header = {
        "step": state.step,
        "loss_count": state.loss_count,
        "loss_sum": state.loss_sum,
        "adam_t": state.optimizer.t,
        "rng_state": state.rng.bit_generator.state,
        "config": serialize(state.config),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    model_blob = checkpoint_bytes(state.model, config_digest=digest(state.config))
    chunks = [
        _STATE_MAGIC,
        struct.pack("<I", _STATE_VERSION),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<I", len(model_blob)),
        model_blob,
    ]
    _write_array_block(chunks, state.optimizer.m)
    _write_array_block(chunks, state.optimizer.v)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_state(path) -> TrainState:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), str(path))
    if rd.take(4) != _STATE_MAGIC:
        raise CheckpointError(f"bad magic in training state {path!r}")
    if rd.u32() != _STATE_VERSION:
        raise CheckpointError("unsupported training-state version")
    header = json.loads(rd.take(rd.u32()).decode())
    cfg = parse(header["config"])
    model = checkpoint_from_bytes(rd.take(rd.u32()), str(path),
                                  expected_latent_dim=cfg.model.latent_dim)
    t = cfg.train
    opt = Adam(t.adam_beta1, t.adam_beta2, t.adam_eps)
    opt.t = header["adam_t"]
    opt.m = _read_array_block(rd)
    opt.v = _read_array_block(rd)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = header["rng_state"]
    return TrainState(config=cfg, model=model, optimizer=opt, rng=rng,
                      step=header["step"], loss_count=header["loss_count"],
                      loss_sum=header["loss_sum"])
