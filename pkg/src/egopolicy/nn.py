"""Minimal neural stack with hand-written gradients (no autodiff).

Architecture: an encoder of affine+tanh+FiLM blocks maps a frame feature x,
modulated by a language embedding z, to a compact representation; a linear
keypoint head predicts the two arms' future 2D waypoints; a small tanh MLP
with a linear skip from its noisy-chunk input predicts diffusion noise for
the action head. Parameters and their gradient accumulators live in flat
named float64 arrays; every loss below accumulates ``scale * d(loss)/dp``
into the gradient buffers (scale 0 skips the backward pass entirely).

Losses are summed over coordinates within a sample and averaged over the
batch, so a single sample's loss equals its plain squared error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ChecksumMismatch, TruncatedFile, VersionMismatch, atomic_write_bytes, crc32c


class DimensionMismatch(Exception):
    """Input shapes disagree with the model configuration."""


class StepOutOfRange(Exception):
    """Diffusion timestep outside [0, steps)."""


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 128
    embed_dim: int = 64
    encoder_widths: tuple[int, ...] = (256, 256, 128)
    horizon: int = 16
    chunk_len: int = 8
    action_dim: int = 6
    temb_dim: int = 32
    head_widths: tuple[int, ...] = (256, 256)

    @property
    def repr_dim(self) -> int:
        return self.encoder_widths[-1]

    @property
    def keypoint_out(self) -> int:
        return 2 * (self.horizon + 1) * 2

    @property
    def chunk_size(self) -> int:
        return self.chunk_len * self.action_dim

    @property
    def head_in(self) -> int:
        return self.chunk_size + self.repr_dim + self.temb_dim

    def to_kv(self) -> dict[str, str]:
        return {
            "feature_dim": str(self.feature_dim),
            "embed_dim": str(self.embed_dim),
            "encoder_widths": ",".join(map(str, self.encoder_widths)),
            "horizon": str(self.horizon),
            "chunk_len": str(self.chunk_len),
            "action_dim": str(self.action_dim),
            "temb_dim": str(self.temb_dim),
            "head_widths": ",".join(map(str, self.head_widths)),
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        return cls(
            feature_dim=int(kv["feature_dim"]),
            embed_dim=int(kv["embed_dim"]),
            encoder_widths=tuple(int(v) for v in kv["encoder_widths"].split(",")),
            horizon=int(kv["horizon"]),
            chunk_len=int(kv["chunk_len"]),
            action_dim=int(kv["action_dim"]),
            temb_dim=int(kv["temb_dim"]),
            head_widths=tuple(int(v) for v in kv["head_widths"].split(",")),
        )


@dataclass
class DiffusionSchedule:
    """Linear-beta schedule with cached alpha products."""

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bars[0] <= 0.99:
            raise ValueError("alpha_bar[0] must exceed 0.99")


def _layer_names(cfg: ModelConfig):
    for i in range(len(cfg.encoder_widths)):
        yield i, (f"enc{i}_w", f"enc{i}_b", f"film{i}_wg", f"film{i}_bg", f"film{i}_wb", f"film{i}_bb")


class ModelParams:
    """Named float64 parameter arrays with matching gradient buffers.

    All arrays are views into two contiguous flat buffers so the optimizer
    and checkpointing can treat the whole model as one vector. Mutate
    entries in place (``params.values[k][...] = x``); rebinding a dict entry
    would sever it from the flat storage.
    """

    def __init__(self, cfg: ModelConfig, values: dict[str, np.ndarray]):
        self.cfg = cfg
        total = sum(v.size for v in values.values())
        self.flat_values = np.empty(total)
        self.flat_grads = np.zeros(total)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        off = 0
        for k, v in values.items():
            n = v.size
            self.values[k] = self.flat_values[off : off + n].reshape(v.shape)
            self.values[k][...] = v
            self.grads[k] = self.flat_grads[off : off + n].reshape(v.shape)
            off += n

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        values: dict[str, np.ndarray] = {}

        def affine(name, n_out, n_in):
            values[f"{name}_w"] = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
            values[f"{name}_b"] = np.zeros(n_out)

        n_in = cfg.feature_dim
        for i, width in enumerate(cfg.encoder_widths):
            affine(f"enc{i}", width, n_in)
            # FiLM generators start as the identity modulation
            values[f"film{i}_wg"] = np.zeros((width, cfg.embed_dim))
            values[f"film{i}_bg"] = np.ones(width)
            values[f"film{i}_wb"] = np.zeros((width, cfg.embed_dim))
            values[f"film{i}_bb"] = np.zeros(width)
            n_in = width
        affine("kp", cfg.keypoint_out, cfg.repr_dim)

        n_in = cfg.head_in
        for i, width in enumerate(cfg.head_widths):
            affine(f"dh{i}", width, n_in)
            n_in = width
        affine(f"dh{len(cfg.head_widths)}", cfg.chunk_size, n_in)
        values["dh_skip"] = np.zeros((cfg.chunk_size, cfg.chunk_size))
        return cls(cfg, values)

    def zero_grad(self) -> None:
        self.flat_grads.fill(0.0)

    def names(self) -> list[str]:
        return list(self.values)

    def flat(self) -> np.ndarray:
        return self.flat_values.copy()

    def load_flat(self, flat: np.ndarray) -> None:
        if flat.size != self.flat_values.size:
            raise DimensionMismatch(
                f"flat vector has {flat.size} entries, expected {self.flat_values.size}"
            )
        self.flat_values[...] = flat

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.values.items()})

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat_values)))

    def checksum(self) -> int:
        return crc32c(self.flat().astype("<f8").tobytes())


# ---------------------------------------------------------------------------
# forward / backward blocks


def film(hidden: np.ndarray, z: np.ndarray, wg: np.ndarray, bg: np.ndarray,
         wb: np.ndarray, bb: np.ndarray) -> np.ndarray:
    """Feature-wise linear modulation: gamma(z) * hidden + beta(z)."""
    hidden = np.atleast_2d(np.asarray(hidden, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if hidden.shape[1] != wg.shape[0] or z.shape[1] != wg.shape[1]:
        raise DimensionMismatch(
            f"film: hidden {hidden.shape}, z {z.shape} vs generator {wg.shape}"
        )
    gamma = z @ wg.T + bg
    beta = z @ wb.T + bb
    return gamma * hidden + beta


def _encoder_forward(params: ModelParams, x: np.ndarray, z: np.ndarray):
    cfg = params.cfg
    if x.shape[1] != cfg.feature_dim or z.shape[1] != cfg.embed_dim:
        raise DimensionMismatch(f"encoder: x {x.shape}, z {z.shape} vs config")
    v = params.values
    h = x
    cache = []
    for _, (w, b, wg, bg, wb, bb) in _layer_names(cfg):
        th = np.tanh(h @ v[w].T + v[b])
        gamma = z @ v[wg].T + v[bg]
        beta = z @ v[wb].T + v[bb]
        cache.append((h, th, gamma))
        h = gamma * th + beta
    return h, cache


def _encoder_backward(params: ModelParams, z: np.ndarray, cache, dh: np.ndarray, scale: float):
    v, g = params.values, params.grads
    for i, (w, b, wg, bg, wb, bb) in reversed(list(_layer_names(params.cfg))):
        x_in, th, gamma = cache[i]
        g[wg] += scale * (dh * th).T @ z
        g[bg] += scale * (dh * th).sum(axis=0)
        g[wb] += scale * dh.T @ z
        g[bb] += scale * dh.sum(axis=0)
        da = dh * gamma * (1.0 - th * th)  # tanh'
        g[w] += scale * da.T @ x_in
        g[b] += scale * da.sum(axis=0)
        dh = da @ v[w]
    return dh


def forward_keypoint(params: ModelParams, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Predicted waypoints, shape (2, H+1, 2) or (B, 2, H+1, 2) for batches."""
    single = np.asarray(x).ndim == 1
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    zb = np.atleast_2d(np.asarray(z, dtype=float))
    feat, _ = _encoder_forward(params, xb, zb)
    pred = feat @ params.values["kp_w"].T + params.values["kp_b"]
    cfg = params.cfg
    pred = pred.reshape(len(xb), 2, cfg.horizon + 1, 2)
    return pred[0] if single else pred


def loss_2d(params: ModelParams, x: np.ndarray, z: np.ndarray, labels: np.ndarray,
            mask: np.ndarray, scale: float = 1.0) -> float:
    """Masked squared waypoint error; accumulates scaled gradients.

    ``labels`` is (B, 2, H+1, 2) and ``mask`` is (B, 2) with False for
    sentinel or invalid hands. A fully masked batch yields loss 0 and no
    gradient.
    """
    cfg = params.cfg
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    labels = np.asarray(labels, dtype=float).reshape(len(x), 2, cfg.horizon + 1, 2)
    m = np.asarray(mask, dtype=float).reshape(len(x), 2)[:, :, None, None]

    feat, cache = _encoder_forward(params, x, z)
    pred = (feat @ params.values["kp_w"].T + params.values["kp_b"]).reshape(labels.shape)
    diff = (pred - labels) * m
    b = len(x)
    loss = float((diff * diff).sum() / b)
    if scale != 0.0:
        dpred = (2.0 / b) * diff.reshape(b, -1)
        params.grads["kp_w"] += scale * dpred.T @ feat
        params.grads["kp_b"] += scale * dpred.sum(axis=0)
        dfeat = dpred @ params.values["kp_w"]
        _encoder_backward(params, z, cache, dfeat, scale)
    return loss


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer diffusion steps, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.atleast_1d(t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _head_forward(params: ModelParams, u: np.ndarray):
    cfg = params.cfg
    v = params.values
    n_hidden = len(cfg.head_widths)
    h = u
    cache = [u]
    for i in range(n_hidden):
        h = np.tanh(h @ v[f"dh{i}_w"].T + v[f"dh{i}_b"])
        cache.append(h)
    out = h @ v[f"dh{n_hidden}_w"].T + v[f"dh{n_hidden}_b"]
    out = out + u[:, : cfg.chunk_size] @ v["dh_skip"].T
    return out, cache


def _head_backward(params: ModelParams, cache, dout: np.ndarray, scale: float):
    cfg = params.cfg
    v, g = params.values, params.grads
    n_hidden = len(cfg.head_widths)
    u = cache[0]
    g["dh_skip"] += scale * dout.T @ u[:, : cfg.chunk_size]
    name = f"dh{n_hidden}"
    g[f"{name}_w"] += scale * dout.T @ cache[-1]
    g[f"{name}_b"] += scale * dout.sum(axis=0)
    dh = dout @ v[f"{name}_w"]
    for i in reversed(range(n_hidden)):
        da = dh * (1.0 - cache[i + 1] * cache[i + 1])
        g[f"dh{i}_w"] += scale * da.T @ cache[i]
        g[f"dh{i}_b"] += scale * da.sum(axis=0)
        dh = da @ v[f"dh{i}_w"]
    du = dh.copy()
    du[:, : cfg.chunk_size] += dout @ v["dh_skip"]
    return du


def predict_noise(params: ModelParams, noisy: np.ndarray, feat: np.ndarray,
                  t: np.ndarray) -> np.ndarray:
    """Noise prediction for pre-encoded features; batched, no gradients."""
    cfg = params.cfg
    b = len(feat)
    u = np.concatenate(
        [noisy.reshape(b, cfg.chunk_size), feat, timestep_embedding(t, cfg.temb_dim)], axis=1
    )
    out, _ = _head_forward(params, u)
    return out.reshape(b, cfg.chunk_len, cfg.action_dim)


def ddpm_add_noise(chunk: np.ndarray, t: int, noise: np.ndarray,
                   sched: DiffusionSchedule) -> np.ndarray:
    if not 0 <= t < sched.steps:
        raise StepOutOfRange(f"step {t} outside [0, {sched.steps})")
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * np.asarray(chunk, dtype=float) + math.sqrt(1.0 - ab) * np.asarray(
        noise, dtype=float
    )


def loss_policy_given(params: ModelParams, y: np.ndarray, z: np.ndarray, chunks: np.ndarray,
                      t: np.ndarray, eps: np.ndarray, sched: DiffusionSchedule,
                      scale: float = 1.0) -> float:
    """Noise-prediction MSE at fixed timesteps and noise draws."""
    cfg = params.cfg
    y = np.atleast_2d(np.asarray(y, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    b = len(y)
    chunks = np.asarray(chunks, dtype=float).reshape(b, cfg.chunk_len, cfg.action_dim)
    t = np.atleast_1d(t)
    if np.any(t < 0) or np.any(t >= sched.steps):
        raise StepOutOfRange(f"steps outside [0, {sched.steps})")
    eps = np.asarray(eps, dtype=float).reshape(chunks.shape)

    ab = sched.alpha_bars[t][:, None, None]
    noisy = np.sqrt(ab) * chunks + np.sqrt(1.0 - ab) * eps

    feat, enc_cache = _encoder_forward(params, y, z)
    u = np.concatenate(
        [noisy.reshape(b, cfg.chunk_size), feat, timestep_embedding(t, cfg.temb_dim)], axis=1
    )
    pred, head_cache = _head_forward(params, u)
    diff = pred - eps.reshape(b, cfg.chunk_size)
    loss = float((diff * diff).sum() / b)
    if scale != 0.0:
        dpred = (2.0 / b) * diff
        du = _head_backward(params, head_cache, dpred, scale)
        dfeat = du[:, cfg.chunk_size : cfg.chunk_size + cfg.repr_dim]
        _encoder_backward(params, z, enc_cache, dfeat, scale)
    return loss


def loss_policy(params: ModelParams, y: np.ndarray, z: np.ndarray, chunks: np.ndarray,
                sched: DiffusionSchedule, rng: np.random.Generator,
                scale: float = 1.0) -> float:
    """Diffusion behavior-cloning loss with random timesteps and noise."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    b = len(y)
    cfg = params.cfg
    t = rng.integers(0, sched.steps, size=b)
    eps = rng.standard_normal((b, cfg.chunk_len, cfg.action_dim))
    return loss_policy_given(params, y, z, chunks, t, eps, sched, scale)


def ddpm_sample(params: ModelParams, feature: np.ndarray, z: np.ndarray,
                sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling of one action chunk, shape (A, action_dim)."""
    chunks = ddpm_sample_batch(
        params, np.atleast_2d(feature), np.atleast_2d(z), sched, [rng]
    )
    return chunks[0]


def ddpm_sample_batch(params: ModelParams, features: np.ndarray, z: np.ndarray,
                      sched: DiffusionSchedule, rngs) -> np.ndarray:
    """Sample one chunk per row; each row consumes its own generator."""
    cfg = params.cfg
    features = np.atleast_2d(np.asarray(features, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    b = len(features)
    if len(rngs) != b:
        raise DimensionMismatch(f"{b} rows but {len(rngs)} generators")
    feat, _ = _encoder_forward(params, features, z)

    shape = (cfg.chunk_len, cfg.action_dim)
    x = np.stack([r.standard_normal(shape) for r in rngs])
    for step in range(sched.steps - 1, -1, -1):
        t = np.full(b, step)
        eps_hat = predict_noise(params, x, feat, t)
        beta = sched.betas[step]
        ab = sched.alpha_bars[step]
        mean = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(sched.alphas[step])
        if step > 0:
            var = (1.0 - sched.alpha_bars[step - 1]) / (1.0 - ab) * beta
            noise = np.stack([r.standard_normal(shape) for r in rngs])
            x = mean + math.sqrt(var) * noise
        else:
            x = mean
    return x


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = "egopolicy-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path: str, step: int = 0, rng_state: str = "") -> None:
    """Text header (config echo, step, RNG state) + flat binary32 payload."""
    payload = params.flat().astype("<f4").tobytes()
    lines = [f"{_CKPT_MAGIC} {_CKPT_VERSION}", f"step {step}", f"rng_state {rng_state or '-'}"]
    lines += [f"{k} {v}" for k, v in params.cfg.to_kv().items()]
    lines.append(f"payload {len(payload)} {crc32c(payload):08x}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8") + payload)


def load_checkpoint(path: str) -> tuple[ModelParams, int, str]:
    with open(path, "rb") as f:
        raw = f.read()
    header_end = raw.find(b"payload ")
    if header_end < 0:
        raise TruncatedFile(f"{path}: no payload marker")
    nl = raw.find(b"\n", header_end)
    if nl < 0:
        raise TruncatedFile(f"{path}: unterminated payload line")
    header = raw[:nl].decode("utf-8").splitlines()
    magic, _, ver = header[0].partition(" ")
    if magic != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if ver.strip() != str(_CKPT_VERSION):
        raise VersionMismatch(f"checkpoint version {ver}, expected {_CKPT_VERSION}")
    kv = dict(line.split(" ", 1) for line in header[1:])
    nbytes, crc_hex = kv.pop("payload").split()
    payload = raw[nl + 1 :]
    if len(payload) < int(nbytes):
        raise TruncatedFile(f"{path}: payload has {len(payload)} of {nbytes} bytes")
    payload = payload[: int(nbytes)]
    if crc32c(payload) != int(crc_hex, 16):
        raise ChecksumMismatch(f"{path}: parameter payload checksum mismatch")
    step = int(kv.pop("step", "0"))
    rng_state = kv.pop("rng_state", "-")
    cfg = ModelConfig.from_kv(kv)
    params = ModelParams.init(cfg, seed=0)
    params.load_flat(np.frombuffer(payload, dtype="<f4").astype(np.float64))
    return params, step, "" if rng_state == "-" else rng_state
