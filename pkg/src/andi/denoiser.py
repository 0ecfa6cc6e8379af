"""Timestep-conditioned convolutional denoiser with explicit gradients.

A small encoder-decoder: per stage two 3x3 zero-padded convolutions with a
per-channel learned gain and SiLU gating, plus a broadcast additive
projection of a sinusoidal timestep embedding; 2x2 mean pooling on the way
down, nearest-neighbour upsampling and channel-concatenation skips on the
way up; final 3x3 convolution back to the input channel count. The output
head is zero-initialized so a fresh model predicts zero noise. All math is
plain numpy in the dtype of the parameter vector, so the same code runs the
float32 training path and the float64 gradient checks.

The backward pass is hand-derived, not autodiff: ``backward`` returns
d<grad_out, forward(theta, x, t)>/dtheta for every parameter.
"""

import threading
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import keyed_rng

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "architecture_table",
    "init_params",
    "timestep_embedding",
    "forward",
    "forward_batch",
    "backward",
]


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int
    base_width: int = 16
    depth: int = 2
    time_embed_dim: int = 32

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValidationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_width < 1:
            raise ValidationError(f"base_width must be >= 1, got {self.base_width}")
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValidationError(
                f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}"
            )

    def stage_widths(self) -> list:
        return [self.base_width * (1 << s) for s in range(self.depth + 1)]


def _block_shapes(prefix: str, cin: int, cout: int, embed: int) -> list:
    return [
        (f"{prefix}.conv1.w", (3, 3, cin, cout)),
        (f"{prefix}.conv1.b", (cout,)),
        (f"{prefix}.norm1.g", (cout,)),
        (f"{prefix}.time.w", (embed, cout)),
        (f"{prefix}.time.b", (cout,)),
        (f"{prefix}.conv2.w", (3, 3, cout, cout)),
        (f"{prefix}.conv2.b", (cout,)),
        (f"{prefix}.norm2.g", (cout,)),
    ]


def architecture_table(cfg: DenoiserConfig) -> list:
    """Ordered (name, shape) pairs covering every parameter tensor."""
    widths = cfg.stage_widths()
    table = []
    cin = cfg.in_channels
    for s in range(cfg.depth):
        table += _block_shapes(f"enc{s}", cin, widths[s], cfg.time_embed_dim)
        cin = widths[s]
    table += _block_shapes("mid", cin, widths[cfg.depth], cfg.time_embed_dim)
    cin = widths[cfg.depth]
    for s in range(cfg.depth - 1, -1, -1):
        table += _block_shapes(
            f"dec{s}", cin + widths[s], widths[s], cfg.time_embed_dim
        )
        cin = widths[s]
    table += [
        ("out.w", (3, 3, widths[0], cfg.in_channels)),
        ("out.b", (cfg.in_channels,)),
    ]
    return table


@dataclass(frozen=True)
class DenoiserParams:
    """Flat parameter vector plus the named-tensor index into it."""

    config: DenoiserConfig
    values: np.ndarray
    index: tuple  # ((name, shape, offset), ...)

    def __post_init__(self):
        end = 0
        views = {}
        for name, shape, offset in self.index:
            if offset != end:
                raise ValidationError("parameter index has gaps or overlaps")
            end += int(np.prod(shape))
            views[name] = self.values[offset:end].reshape(shape)
        if end != self.values.size:
            raise ValidationError(
                f"parameter vector length {self.values.size} != index extent {end}"
            )
        object.__setattr__(self, "_views", views)

    @property
    def param_count(self) -> int:
        return int(self.values.size)

    def get(self, name: str) -> np.ndarray:
        return self._views[name]

    def replace_values(self, values: np.ndarray) -> "DenoiserParams":
        if values.shape != self.values.shape:
            raise ValidationError("replacement vector has a different length")
        return DenoiserParams(self.config, values, self.index)

    def astype(self, dtype) -> "DenoiserParams":
        return self.replace_values(self.values.astype(dtype))


def _build_index(cfg: DenoiserConfig) -> tuple:
    index = []
    offset = 0
    for name, shape in architecture_table(cfg):
        index.append((name, shape, offset))
        offset += int(np.prod(shape))
    return tuple(index)


def init_params(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    """Fan-in-scaled uniform weights, unit gains, zero biases and output head."""
    rng = keyed_rng(seed, "denoiser-init")
    index = _build_index(cfg)
    total = index[-1][2] + int(np.prod(index[-1][1]))
    values = np.zeros(total, dtype=np.float32)
    params = DenoiserParams(cfg, values, index)
    for name, shape, offset in index:
        n = int(np.prod(shape))
        view = values[offset : offset + n]
        if name.startswith("out."):
            continue  # zero head: fresh model predicts zero noise
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / np.sqrt(fan_in)
            view[:] = rng.uniform(-bound, bound, size=n).astype(np.float32)
        elif name.endswith(".g"):
            view[:] = 1.0
    return params


def timestep_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features for integer timesteps; shape (N, dim), values in [-1, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    if half > 1:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


# ---------------------------------------------------------------------------
# primitive ops (forward + hand-derived backward)
# ---------------------------------------------------------------------------

# Transient work buffers (padded inputs, patch matrices, gradient scratch) are
# large and identically shaped call after call, so they are pooled per thread
# instead of reallocated. Nothing pooled ever escapes a single primitive call.
_scratch_pools = threading.local()


def _scratch(tag: str, shape, dtype) -> np.ndarray:
    pool = getattr(_scratch_pools, "pool", None)
    if pool is None:
        pool = _scratch_pools.pool = {}
    key = (tag, shape, np.dtype(dtype))
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


def _pad_input(x):
    n, h, w, c = x.shape
    xpad = _scratch("xpad", (n, h + 2, w + 2, c), x.dtype)
    xpad[:, 0] = 0
    xpad[:, -1] = 0
    xpad[:, :, 0] = 0
    xpad[:, :, -1] = 0
    xpad[:, 1 : h + 1, 1 : w + 1] = x
    return xpad


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xpad = _pad_input(x)
    cols = _scratch("cols", (n, h, w, 3, 3, c), x.dtype)
    windows = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(1, 2))
    np.copyto(cols, windows.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * h * w, 9 * c)


def _conv3x3_fwd(x, w, b):
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    cols = _im2col(x)
    y = cols @ w.reshape(9 * cin, cout)
    y = y.reshape(n, h, wd, cout)
    y += b
    return y


def _conv3x3_bwd(x, w, dy):
    # one offset at a time: no patch matrix is ever materialized
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xpad = _pad_input(x)
    dy_flat = dy.reshape(-1, cout)
    dw = np.empty_like(w)
    db = dy_flat.sum(axis=0)
    sbuf = _scratch("shift", (n, h, wd, cin), x.dtype)
    tbuf = _scratch("dxoff", (n * h * wd, cin), x.dtype)
    dxpad = _scratch("dxpad", (n, h + 2, wd + 2, cin), x.dtype)
    dxpad[:] = 0
    for di in range(3):
        for dj in range(3):
            np.copyto(sbuf, xpad[:, di : di + h, dj : dj + wd, :])
            dw[di, dj] = sbuf.reshape(-1, cin).T @ dy_flat
            np.matmul(dy_flat, w[di, dj].T, out=tbuf)
            dxpad[:, di : di + h, dj : dj + wd, :] += tbuf.reshape(n, h, wd, cin)
    return dxpad[:, 1:-1, 1:-1, :].copy(), dw, db


def _sigmoid(x):
    # tanh half-angle form: stable and a single transcendental pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_fwd(x):
    return x * _sigmoid(x)


def _silu_bwd(x, dy):
    s = _sigmoid(x)
    return dy * (s * (1.0 + x * (1.0 - s)))


def _avgpool2_fwd(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_bwd(dy):
    dy = dy * dy.dtype.type(0.25)
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2)


def _upsample2_fwd(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_bwd(dy):
    n, h2, w2, c = dy.shape
    return dy.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# network assembly
# ---------------------------------------------------------------------------


def _block_fwd(x, emb, params, prefix, tape):
    p = params.get
    a1 = _conv3x3_fwd(x, p(f"{prefix}.conv1.w"), p(f"{prefix}.conv1.b"))
    g1 = a1 * p(f"{prefix}.norm1.g")
    s1 = _silu_fwd(g1)
    tv = emb @ p(f"{prefix}.time.w") + p(f"{prefix}.time.b")
    h = s1 + tv[:, None, None, :]
    a2 = _conv3x3_fwd(h, p(f"{prefix}.conv2.w"), p(f"{prefix}.conv2.b"))
    g2 = a2 * p(f"{prefix}.norm2.g")
    out = _silu_fwd(g2)
    if tape is not None:
        tape.append((prefix, x, a1, g1, h, a2, g2, emb))
    return out


def _block_bwd(dout, record, params, grads):
    prefix, x, a1, g1, h, a2, g2, emb = record
    p = params.get

    def acc(name, g):
        grads[name] = grads[name] + g.ravel() if name in grads else g.ravel()

    dg2 = _silu_bwd(g2, dout)
    acc(f"{prefix}.norm2.g", (dg2 * a2).sum(axis=(0, 1, 2)))
    da2 = dg2 * p(f"{prefix}.norm2.g")
    dh, dw2, db2 = _conv3x3_bwd(h, p(f"{prefix}.conv2.w"), da2)
    acc(f"{prefix}.conv2.w", dw2)
    acc(f"{prefix}.conv2.b", db2)
    dtv = dh.sum(axis=(1, 2))
    acc(f"{prefix}.time.w", emb.T @ dtv)
    acc(f"{prefix}.time.b", dtv.sum(axis=0))
    dg1 = _silu_bwd(g1, dh)
    acc(f"{prefix}.norm1.g", (dg1 * a1).sum(axis=(0, 1, 2)))
    da1 = dg1 * p(f"{prefix}.norm1.g")
    dx, dw1, db1 = _conv3x3_bwd(x, p(f"{prefix}.conv1.w"), da1)
    acc(f"{prefix}.conv1.w", dw1)
    acc(f"{prefix}.conv1.b", db1)
    return dx


def _check_spatial(cfg: DenoiserConfig, shape) -> None:
    div = 1 << cfg.depth
    h, w = shape[1], shape[2]
    if h % div or w % div:
        raise ValidationError(
            f"spatial dims ({h}, {w}) must be divisible by 2**depth = {div}"
        )


def _forward_batch(params: DenoiserParams, x: np.ndarray, t: np.ndarray, tape):
    cfg = params.config
    if x.ndim != 4 or x.shape[3] != cfg.in_channels:
        raise ValidationError(
            f"expected (N, H, W, {cfg.in_channels}) input, got shape {x.shape}"
        )
    _check_spatial(cfg, x.shape)
    t = np.atleast_1d(np.asarray(t))
    if np.any(t < 1):
        raise ValidationError("timesteps must be >= 1")
    if t.shape[0] != x.shape[0]:
        raise ValidationError("one timestep per sample is required")
    dtype = params.values.dtype
    x = x.astype(dtype, copy=False)
    emb = timestep_embedding(t, cfg.time_embed_dim, dtype=dtype)

    skips = []
    h = x
    for s in range(cfg.depth):
        h = _block_fwd(h, emb, params, f"enc{s}", tape)
        skips.append(h)
        h = _avgpool2_fwd(h)
    h = _block_fwd(h, emb, params, "mid", tape)
    for s in range(cfg.depth - 1, -1, -1):
        h = _upsample2_fwd(h)
        h = np.concatenate([h, skips[s]], axis=3)
        h = _block_fwd(h, emb, params, f"dec{s}", tape)
    out = _conv3x3_fwd(h, params.get("out.w"), params.get("out.b"))
    if tape is not None:
        tape.append(("__out__", h))
    return out


def _backward_from_tape(params: DenoiserParams, tape: list, grad_out: np.ndarray):
    cfg = params.config
    grads = {}
    tag, h_last = tape[-1]
    assert tag == "__out__"
    dh, dw, db = _conv3x3_bwd(h_last, params.get("out.w"), grad_out)
    grads["out.w"] = dw.ravel()
    grads["out.b"] = db.ravel()
    pos = len(tape) - 2

    dskips = {}
    for s in range(cfg.depth):  # decoder records sit at the tape tail
        record = tape[pos]
        assert record[0] == f"dec{s}"
        dh = _block_bwd(dh, record, params, grads)
        skip_c = cfg.stage_widths()[s]
        dskips[s] = dh[..., -skip_c:]
        dh = _upsample2_bwd(dh[..., :-skip_c])
        pos -= 1
    record = tape[pos]
    assert record[0] == "mid"
    dh = _block_bwd(dh, record, params, grads)
    pos -= 1
    for s in range(cfg.depth - 1, -1, -1):
        dh = _avgpool2_bwd(dh) + dskips[s]
        record = tape[pos]
        assert record[0] == f"enc{s}"
        dh = _block_bwd(dh, record, params, grads)
        pos -= 1

    flat = np.zeros_like(params.values)
    for name, shape, offset in params.index:
        if name in grads:
            flat[offset : offset + int(np.prod(shape))] = grads[name]
    return flat


def forward_batch(params: DenoiserParams, x: np.ndarray, t) -> np.ndarray:
    """Batched noise prediction: (N, H, W, C) and per-sample timesteps."""
    return _forward_batch(params, np.asarray(x), np.asarray(t), tape=None)


def forward(params: DenoiserParams, x_t: np.ndarray, t: int) -> np.ndarray:
    """Predict the noise in a single (H, W, C) slice at timestep t."""
    x_t = np.asarray(x_t)
    if x_t.ndim != 3:
        raise ValidationError(f"expected an (H, W, C) slice, got shape {x_t.shape}")
    out = _forward_batch(params, x_t[None], np.array([t]), tape=None)
    return out[0]


def backward(params: DenoiserParams, x_t: np.ndarray, t: int, grad_out: np.ndarray):
    """Gradient of <grad_out, forward(params, x_t, t)> w.r.t. every parameter."""
    x_t = np.asarray(x_t)
    grad_out = np.asarray(grad_out)
    if grad_out.shape != x_t.shape:
        raise ValidationError(
            f"grad_out shape {grad_out.shape} does not match input {x_t.shape}"
        )
    tape = []
    _forward_batch(params, x_t[None], np.array([t]), tape=tape)
    dtype = params.values.dtype
    return _backward_from_tape(params, tape, grad_out[None].astype(dtype, copy=False))
