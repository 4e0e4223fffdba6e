"""Conditioned denoiser: pointwise backbone, shape encoder, and the
consistency wrapper that enforces the boundary condition through its
output scalings.

The backbone applies the same small MLP to every point (so it is
equivariant to point order); each layer's output is gated and shifted
by a context row built from the shape latent and three time features.
The encoder is a per-point MLP pooled with a channel-wise max, which
makes the latent invariant to point order.

Checkpoints are a flat binary container: magic ``CMAD``, a u32 format
version, a small key=value meta block (with its own sha256 guard and a
digest of the config that produced the run), then one record per
parameter, sorted by id.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

from . import numerics as nm
from .errors import CheckpointError, ContractError, NumericalError

BACKBONE_WIDTHS = (3, 128, 256, 512, 256, 128, 3)
ENCODER_HIDDEN = (64, 128)
TIME_FEATURES = 3

_CKPT_MAGIC = b"CMAD"
_CKPT_VERSION = 1


def scalings(t: float, sigma_data: float, eps: float) -> tuple[float, float, float]:
    """Boundary-enforcing output/input scalings at noise level t.

    c_skip = sd^2 / ((t-eps)^2 + sd^2)
    c_out  = (t-eps) * sd / sqrt(t^2 + sd^2)
    c_in   = 1 / sqrt(t^2 + sd^2)

    At t == eps these are exactly (1, 0, 1/sqrt(eps^2+sd^2)), which is
    what pins f(x, eps) == x regardless of the network output.
    """
    if t < eps:
        raise ContractError(f"noise level {t} below the boundary {eps}")
    sd2 = sigma_data * sigma_data
    c_skip = sd2 / ((t - eps) ** 2 + sd2)
    c_out = (t - eps) * sigma_data / math.sqrt(t * t + sd2)
    c_in = 1.0 / math.sqrt(t * t + sd2)
    return c_skip, c_out, c_in


def time_features(t: float) -> np.ndarray:
    """Context features for the noise level: [t, sin(lt), cos(lt)] with
    lt = log(t)/4."""
    lt = math.log(t) / 4.0
    return np.array([[t, math.sin(lt), math.cos(lt)]])


def _kaiming_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConcatSquashLayer:
    """Linear layer whose output is gated and shifted by a context row.

    y = (x @ W + b) * sigmoid(ctx @ Wg) + (ctx @ Wb + bb)

    The gate path deliberately has no bias of its own. A zero-initialized
    instance outputs exactly zero for any input.
    """

    def __init__(self, d_in: int, d_out: int, d_ctx: int, name: str,
                 rng: np.random.Generator, zero_init: bool = False):
        def init(fan_in, shape):
            if zero_init:
                return np.zeros(shape)
            return _kaiming_uniform(rng, fan_in, shape)

        self.main_w = nm.Parameter(init(d_in, (d_in, d_out)), f"{name}.main_w")
        self.main_b = nm.Parameter(np.zeros((1, d_out)), f"{name}.main_b")
        self.gate_w = nm.Parameter(init(d_ctx, (d_ctx, d_out)), f"{name}.gate_w")
        self.bias_w = nm.Parameter(init(d_ctx, (d_ctx, d_out)), f"{name}.bias_w")
        self.bias_b = nm.Parameter(np.zeros((1, d_out)), f"{name}.bias_b")

    def forward(self, x, ctx):
        h = nm.affine(x, self.main_w, self.main_b)
        gate = nm.sigmoid(nm.matmul(ctx, self.gate_w))
        shift = nm.affine(ctx, self.bias_w, self.bias_b)
        return nm.add(nm.mul(h, gate), shift)

    def parameters(self):
        return [self.main_w, self.main_b, self.gate_w, self.bias_w, self.bias_b]


class PointwiseNet:
    """Six gated layers, 3 -> 128 -> 256 -> 512 -> 256 -> 128 -> 3, with
    leaky ReLU between them. The last layer starts all-zero so an
    untrained model reduces to its skip connection."""

    def __init__(self, d_ctx: int, name: str, rng: np.random.Generator):
        self.layers = []
        n_layers = len(BACKBONE_WIDTHS) - 1
        for i in range(n_layers):
            self.layers.append(
                ConcatSquashLayer(
                    BACKBONE_WIDTHS[i], BACKBONE_WIDTHS[i + 1], d_ctx,
                    f"{name}.layer{i}", rng, zero_init=(i == n_layers - 1),
                )
            )

    def forward(self, x, ctx):
        h = x
        for i, layer in enumerate(self.layers):
            try:
                h = layer.forward(h, ctx)
            except NumericalError as err:
                raise NumericalError(f"backbone layer {i}: {err}") from None
            if i < len(self.layers) - 1:
                h = nm.leaky_relu(h)
        return h

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]


class ShapeEncoder:
    """Permutation-invariant cloud summary.

    Shared per-point MLP 3 -> 64 -> 128 -> latent, channel-wise max over
    points, then one more affine head to the latent width.
    """

    def __init__(self, latent_dim: int, name: str, rng: np.random.Generator):
        widths = (3,) + ENCODER_HIDDEN + (latent_dim,)
        self.mlp = []
        for i in range(len(widths) - 1):
            w = nm.Parameter(_kaiming_uniform(rng, widths[i], (widths[i], widths[i + 1])),
                             f"{name}.mlp{i}_w")
            b = nm.Parameter(np.zeros((1, widths[i + 1])), f"{name}.mlp{i}_b")
            self.mlp.append((w, b))
        self.head_w = nm.Parameter(_kaiming_uniform(rng, latent_dim, (latent_dim, latent_dim)),
                                   f"{name}.head_w")
        self.head_b = nm.Parameter(np.zeros((1, latent_dim)), f"{name}.head_b")

    def forward(self, pts):
        h = pts
        for i, (w, b) in enumerate(self.mlp):
            h = nm.affine(h, w, b)
            if i < len(self.mlp) - 1:
                h = nm.relu(h)
        pooled = nm.max_pool_rows(h)
        return nm.affine(pooled, self.head_w, self.head_b)

    def parameters(self):
        out = []
        for w, b in self.mlp:
            out.extend([w, b])
        out.extend([self.head_w, self.head_b])
        return out


class ConsistencyModel:
    """Online and target copies of (backbone, encoder) plus the boundary
    scalings that tie them into a one-step denoiser.

    The target copy starts as an exact clone of the online weights and
    is only ever moved by EMA updates; evaluating it never records
    gradients.
    """

    def __init__(self, latent_dim: int = 128, sigma_data: float = 0.5,
                 eps: float = 0.002, seed: int = 0):
        if latent_dim < 1:
            raise ContractError(f"latent_dim must be positive, got {latent_dim}")
        if sigma_data <= 0 or eps <= 0:
            raise ContractError("sigma_data and eps must be positive")
        self.latent_dim = latent_dim
        self.sigma_data = sigma_data
        self.eps = eps
        d_ctx = latent_dim + TIME_FEATURES
        rng = np.random.default_rng(seed)
        self.net = PointwiseNet(d_ctx, "online/net", rng)
        self.encoder = ShapeEncoder(latent_dim, "online/enc", rng)
        # target starts as a bit-exact clone
        rng_t = np.random.default_rng(seed)
        self.target_net = PointwiseNet(d_ctx, "target/net", rng_t)
        self.target_encoder = ShapeEncoder(latent_dim, "target/enc", rng_t)
        for po, pt in self.parameter_pairs():
            pt.value[...] = po.value

    def parameters(self, which: str = "online"):
        if which == "online":
            return self.net.parameters() + self.encoder.parameters()
        if which == "target":
            return self.target_net.parameters() + self.target_encoder.parameters()
        raise ContractError(f"which must be online or target, got {which!r}")

    def parameter_pairs(self):
        """(online, target) parameters in matching order."""
        return list(zip(self.parameters("online"), self.parameters("target")))

    def encode(self, pts, which: str = "online") -> nm.Tensor:
        """Shape latent for a cloud, a (1, latent_dim) row.

        The online encoder records gradients when a recording tape is
        active; the target encoder never does.
        """
        x = pts if isinstance(pts, nm.Tensor) else nm.Tensor(pts)
        if which == "online":
            return self.encoder.forward(x)
        if which == "target":
            with nm.frozen():
                return self.target_encoder.forward(x)
        raise ContractError(f"which must be online or target, got {which!r}")

    def forward(self, x, t: float, c: nm.Tensor, which: str = "online") -> nm.Tensor:
        """Denoise x at level t, conditioned on latent c.

        f(x, t, c) = c_skip(t) * x + c_out(t) * F(c_in(t) * x, ctx)

        where ctx is the latent concatenated with the time features. At
        t == eps this returns x exactly.
        """
        x = x if isinstance(x, nm.Tensor) else nm.Tensor(x)
        if x.shape[1] != 3:
            raise ContractError(f"denoiser input must be (N, 3), got {x.shape}")
        if c.shape != (1, self.latent_dim):
            raise ContractError(f"latent must be (1, {self.latent_dim}), got {c.shape}")
        c_skip, c_out, c_in = scalings(t, self.sigma_data, self.eps)
        feats = nm.Tensor(time_features(t))

        def run(net):
            ctx = nm.concat_cols(c, feats)
            raw = net.forward(nm.scale(x, c_in), ctx)
            return nm.add(nm.scale(x, c_skip), nm.scale(raw, c_out))

        if which == "online":
            return run(self.net)
        if which == "target":
            with nm.frozen():
                return run(self.target_net)
        raise ContractError(f"which must be online or target, got {which!r}")


# ---------------------------------------------------------------------------
# checkpoints


def _meta_text(model: ConsistencyModel, config_digest: str) -> str:
    return (
        f"config_digest={config_digest}\n"
        f"eps={model.eps!r}\n"
        f"latent_dim={model.latent_dim}\n"
        f"sigma_data={model.sigma_data!r}\n"
    )


def checkpoint_bytes(model: ConsistencyModel, config_digest: str = "") -> bytes:
    """Serialize every parameter (online and target) plus model meta."""
    meta = _meta_text(model, config_digest).encode()
    params = sorted(model.parameters("online") + model.parameters("target"),
                    key=lambda p: p.id)
    chunks = [
        _CKPT_MAGIC,
        struct.pack("<I", _CKPT_VERSION),
        struct.pack("<I", len(meta)),
        meta,
        hashlib.sha256(meta).digest(),
        struct.pack("<I", len(params)),
    ]
    for p in params:
        ident = p.id.encode()
        chunks.append(struct.pack("<I", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<II", *p.value.shape))
        chunks.append(p.value.astype("<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: ConsistencyModel, path, config_digest: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, config_digest))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint {self.path!r} at byte {self.pos}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_latent_dim: int | None = None,
                    expected_config_digest: str | None = None) -> ConsistencyModel:
    """Rebuild a model from a checkpoint file.

    Mismatched meta integrity, unknown/missing parameter ids, or shape
    mismatches raise CheckpointError naming the offender. If the caller
    knows what latent width or config the checkpoint should carry, pass
    the expectations and they are enforced.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob, str(path), expected_latent_dim,
                                 expected_config_digest)


def checkpoint_from_bytes(blob: bytes, path: str = "<bytes>",
                          expected_latent_dim: int | None = None,
                          expected_config_digest: str | None = None) -> ConsistencyModel:
    rd = _Reader(blob, path)
    if rd.take(4) != _CKPT_MAGIC:
        raise CheckpointError(f"bad magic in {path!r}")
    version = rd.u32()
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_raw = rd.take(rd.u32())
    if rd.take(32) != hashlib.sha256(meta_raw).digest():
        raise CheckpointError(f"meta block corrupted in {path!r}")
    meta = dict(line.split("=", 1) for line in meta_raw.decode().splitlines())
    latent_dim = int(meta["latent_dim"])
    sigma_data = float(meta["sigma_data"])
    eps = float(meta["eps"])
    if expected_latent_dim is not None and latent_dim != expected_latent_dim:
        raise CheckpointError(
            f"checkpoint latent_dim {latent_dim} != configured {expected_latent_dim}"
        )
    if expected_config_digest is not None and meta["config_digest"] != expected_config_digest:
        raise CheckpointError("checkpoint was produced by a different config")

    model = ConsistencyModel(latent_dim=latent_dim, sigma_data=sigma_data, eps=eps, seed=0)
    by_id = {p.id: p for p in model.parameters("online") + model.parameters("target")}
    n_records = rd.u32()
    if n_records != len(by_id):
        raise CheckpointError(
            f"checkpoint has {n_records} parameters, model needs {len(by_id)}"
        )
    seen = set()
    for _ in range(n_records):
        ident = rd.take(rd.u32()).decode()
        if ident not in by_id:
            raise CheckpointError(f"unknown parameter id {ident!r}")
        if ident in seen:
            raise CheckpointError(f"duplicate parameter id {ident!r}")
        seen.add(ident)
        rows, cols = struct.unpack("<II", rd.take(8))
        p = by_id[ident]
        if (rows, cols) != p.value.shape:
            raise CheckpointError(
                f"shape mismatch for {ident!r}: file has ({rows}, {cols}), "
                f"model has {p.value.shape}"
            )
        payload = rd.take(rows * cols * 8)
        p.value[...] = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    return model
