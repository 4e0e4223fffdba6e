"""Flat namespaced run configuration.

Config files are ``key = value`` lines with ``#`` comments, keys like
``schedule.T`` or ``train.batch_size``. Unknown keys are rejected by
name so typos fail loudly. ``serialize`` emits every key in a stable
order, which is also what gets hashed into checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib

from .errors import ConfigError


@dataclasses.dataclass
class ScheduleSection:
    eps: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    s0: int = 2
    s1: int = 1025
    mu0: float = 0.95
    nk_variant: str = "floor"


@dataclasses.dataclass
class ModelSection:
    latent_dim: int = 128
    sigma_data: float = 0.5


@dataclasses.dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 8
    points_per_cloud: int = 128  # training subsample; eval always sees full clouds
    seed: int = 42
    checkpoint_every: int = 0  # 0 = final checkpoint only
    loss_variant: str = "hybrid"
    lambda_hybrid: float = 1.0
    lr_initial: float = 2e-4
    lr_final: float = 5e-6
    lr_warm_frac: float = 0.0125
    lr_tail_frac: float = 0.0125
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclasses.dataclass
class PatchGenSection:
    scale: float = 0.05
    patch_fraction: float = 0.05
    translation_sigma: float = 1.0
    mode: str = "bulge"


@dataclasses.dataclass
class SamplerSection:
    steps: int = 2
    tau_last: float = 0.5
    use_target_net: bool = True


@dataclasses.dataclass
class ScoreSection:
    method: str = "recon"  # "train_nn" scores against the training clouds instead
    smooth_neighbors: int = 5
    top_fraction: float = 0.01


@dataclasses.dataclass
class SynthSection:
    shape: str = "sphere"
    n_train: int = 20
    n_test_clean: int = 20
    n_test_anom: int = 20
    points: int = 500
    jitter: float = 0.02
    anomaly_scale: float = 0.2
    anomaly_patch_fraction: float = 0.05
    anomaly_sigma: float = 1.0
    anomaly_mode: str = "bulge"


@dataclasses.dataclass
class Config:
    schedule: ScheduleSection = dataclasses.field(default_factory=ScheduleSection)
    model: ModelSection = dataclasses.field(default_factory=ModelSection)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)
    patchgen: PatchGenSection = dataclasses.field(default_factory=PatchGenSection)
    sampler: SamplerSection = dataclasses.field(default_factory=SamplerSection)
    score: ScoreSection = dataclasses.field(default_factory=ScoreSection)
    synth: SynthSection = dataclasses.field(default_factory=SynthSection)


# attribute names that appear under a different key in files
_KEY_RENAMES = {("schedule", "t_max"): "schedule.T"}
_SECTIONS = [f.name for f in dataclasses.fields(Config)]


def _key_for(section: str, attr: str) -> str:
    return _KEY_RENAMES.get((section, attr), f"{section}.{attr}")


def _registry() -> dict[str, tuple[str, str, type]]:
    """key -> (section, attr, type)."""
    out = {}
    for section in _SECTIONS:
        cls = type(getattr(Config(), section))
        for f in dataclasses.fields(cls):
            out[_key_for(section, f.name)] = (section, f.name, f.type)
    return out


_REGISTRY = _registry()


def default_config() -> Config:
    return Config()


def _convert(key: str, raw: str, typ) -> object:
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def set_value(cfg: Config, key: str, raw: str) -> None:
    if key not in _REGISTRY:
        raise ConfigError(f"unknown config key {key!r}")
    section, attr, typ = _REGISTRY[key]
    setattr(getattr(cfg, section), attr, _convert(key, raw, typ))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: Config) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{_key_for(section, f.name)} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = body.split("=", 1)
        try:
            set_value(cfg, key.strip(), raw)
        except ConfigError as err:
            raise ConfigError(f"line {lineno}: {err}") from None
    validate(cfg)
    return cfg


def load_file(path, base: Config | None = None) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read(), base=base)


def apply_overrides(cfg: Config, assignments) -> Config:
    """Apply ``key=value`` strings (e.g. from --set flags)."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        set_value(cfg, key.strip(), raw)
    validate(cfg)
    return cfg


def digest(cfg: Config) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def validate(cfg: Config) -> None:
    s, t, m = cfg.schedule, cfg.train, cfg.model
    if not 0 < s.eps < s.t_max:
        raise ConfigError("schedule: need 0 < eps < T")
    if s.rho <= 0:
        raise ConfigError("schedule.rho must be positive")
    if not 2 <= s.s0 <= s.s1:
        raise ConfigError("schedule: need 2 <= s0 <= s1")
    if not 0 < s.mu0 < 1:
        raise ConfigError("schedule.mu0 must be in (0, 1)")
    if s.nk_variant not in ("floor", "ceil"):
        raise ConfigError("schedule.nk_variant must be floor or ceil")
    if t.steps < 1 or t.batch_size < 1 or t.points_per_cloud < 4:
        raise ConfigError("train: steps and batch_size must be >= 1, points_per_cloud >= 4")
    if t.loss_variant not in ("hybrid", "ct_online", "ct_target"):
        raise ConfigError(f"train.loss_variant {t.loss_variant!r} not recognized")
    if t.lr_initial <= 0 or t.lr_final <= 0:
        raise ConfigError("train: learning rates must be positive")
    if not 0 <= t.lr_warm_frac + t.lr_tail_frac < 1:
        raise ConfigError("train: warmup and tail fractions must leave room to anneal")
    if m.latent_dim < 1:
        raise ConfigError("model.latent_dim must be positive")
    if m.sigma_data <= 0:
        raise ConfigError("model.sigma_data must be positive")
    if not 0 < cfg.patchgen.patch_fraction < 1:
        raise ConfigError("patchgen.patch_fraction must be in (0, 1)")
    if cfg.patchgen.mode not in ("bulge", "concavity"):
        raise ConfigError("patchgen.mode must be bulge or concavity")
    if cfg.sampler.steps < 1:
        raise ConfigError("sampler.steps must be >= 1")
    if not s.eps <= cfg.sampler.tau_last <= s.t_max:
        raise ConfigError("sampler.tau_last must lie in [eps, T]")
    if cfg.score.method not in ("recon", "train_nn"):
        raise ConfigError("score.method must be recon or train_nn")
    if cfg.score.smooth_neighbors < 1:
        raise ConfigError("score.smooth_neighbors must be >= 1")
    if not 0 < cfg.score.top_fraction <= 1:
        raise ConfigError("score.top_fraction must be in (0, 1]")
    if cfg.synth.shape not in ("sphere", "cube", "cylinder"):
        raise ConfigError("synth.shape must be sphere, cube or cylinder")
    if cfg.synth.points < 4:
        raise ConfigError("synth.points must be >= 4")
