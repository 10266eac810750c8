"""Differentiable layers used by the network: convolution, normalization,
activations, pooling, branch softmax and the L1 loss.

All reductions run in a fixed order per output element, so repeated calls
on identical inputs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, make, pad2d

EPS = 1e-5
MOMENTUM = 0.1


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

@dataclass(eq=False)
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    ``weight`` has shape ``(out_ch, in_ch // groups, k, k)``; the padding
    amount is always ``(k - 1) // 2`` so stride-1 convs keep the spatial size.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    groups: int = 1
    padding: str = "reflect"

    def __post_init__(self):
        w = self.weight.shape
        if len(w) != 4 or w[2] != w[3]:
            raise ConfigError(f"conv weight must be (out, in/groups, k, k), got {w}")
        if w[2] % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {w[2]}")
        if self.stride < 1 or self.groups < 1:
            raise ConfigError("stride and groups must be positive")
        if w[0] % self.groups:
            raise ConfigError(f"out channels {w[0]} not divisible by groups {self.groups}")
        if self.padding not in ("reflect", "zero"):
            raise ConfigError(f"unknown padding {self.padding!r}")
        if self.bias is not None and self.bias.shape != (w[0],):
            raise ConfigError("bias must have one entry per output channel")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    @property
    def is_pointwise(self) -> bool:
        return self.kernel_size == 1 and self.groups == 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2-D convolution (cross-correlation) with derived same-padding.

    Output spatial size is ``ceil(H / stride)``.  Pointwise and depthwise
    convs take dedicated paths; everything else goes through im2col.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ConfigError(f"conv2d: input has {x.shape[1]} channels, "
                          f"conv expects {params.in_channels}")
    k, s = params.kernel_size, params.stride
    p = (k - 1) // 2
    if params.is_pointwise and s == 1:
        out = _conv_pointwise(x, params.weight)
    else:
        xp = pad2d(x, p, p, p, p, params.padding) if p else x
        if params.is_depthwise and s == 1:
            out = _conv_depthwise(xp, params.weight, x.shape[2:])
        elif params.is_depthwise:
            out = _conv_depthwise_strided(xp, params.weight, s, x.shape[2:])
        else:
            out = _conv_im2col(xp, params.weight, s, params.groups, x.shape[2:])
    if params.bias is not None:
        out = _add_channel_bias(out, params.bias)
    return out


def _add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    out = x.data + b.data[None, :, None, None]

    def backward(g):
        if x.requires_grad:
            x._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    return make(out, (x, b), backward)


def _conv_pointwise(x: Tensor, weight: Tensor) -> Tensor:
    B, C, H, W = x.shape
    w = weight.data[:, :, 0, 0]
    xf = x.data.reshape(B, C, H * W)
    out = np.matmul(w, xf).reshape(B, w.shape[0], H, W)

    def backward(g):
        gf = g.reshape(B, w.shape[0], H * W)
        if x.requires_grad:
            x._accum(np.matmul(w.T, gf).reshape(x.shape))
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for b in range(B):
                gw += gf[b] @ xf[b].T
            weight._accum(gw[:, :, None, None])

    return make(out, (x, weight), backward)


def _out_size(n: int, s: int) -> int:
    return (n - 1) // s + 1


def _conv_depthwise(xp: Tensor, weight: Tensor, hw: tuple) -> Tensor:
    """Stride-1 depthwise conv as a direct loop over kernel taps.

    Each padded plane is flattened; output pixel (h, w) sits at flat offset
    h * Wp + w, so every tap is one contiguous multiply-add over a "wide"
    grid whose Wp - W extra columns per row are discarded.
    """
    B, C, Hp, Wp = xp.shape
    H, W = hw
    k = weight.shape[2]
    L = (H - 1) * Wp + W
    w = weight.data[:, 0].reshape(C, k * k)
    a = xp.data.reshape(B, C, Hp * Wp)
    offs = [i * Wp + j for i in range(k) for j in range(k)]
    wide = np.zeros((B, C, H * Wp), dtype=a.dtype)
    acc = wide[:, :, :L]
    tmp = np.empty_like(acc)
    for t, off in enumerate(offs):
        np.multiply(a[:, :, off:off + L], w[None, :, t, None], out=tmp)
        acc += tmp
    out = wide.reshape(B, C, H, Wp)[:, :, :, :W].copy()

    def backward(g):
        gw_ = np.zeros((B, C, H, Wp), dtype=g.dtype)
        gw_[:, :, :, :W] = g
        gl = gw_.reshape(B, C, H * Wp)[:, :, :L]
        if xp.requires_grad:
            gx = np.zeros_like(a)
            for t, off in enumerate(offs):
                np.multiply(gl, w[None, :, t, None], out=tmp)
                gx[:, :, off:off + L] += tmp
            xp._accum(gx.reshape(xp.shape))
        if weight.requires_grad:
            gk = np.empty_like(w)
            for t, off in enumerate(offs):
                gk[:, t] = np.einsum("bcl,bcl->c", gl, a[:, :, off:off + L])
            weight._accum(gk.reshape(C, 1, k, k))

    return make(out, (xp, weight), backward)


def _conv_depthwise_strided(xp: Tensor, weight: Tensor, s: int, hw: tuple) -> Tensor:
    """General-stride depthwise conv over strided window views."""
    k = weight.shape[2]
    Ho, Wo = _out_size(hw[0], s), _out_size(hw[1], s)
    w = weight.data[:, 0]
    a = xp.data
    out = np.zeros((a.shape[0], a.shape[1], Ho, Wo), dtype=a.dtype)
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            win = a[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s]
            np.multiply(win, w[None, :, i, j, None, None], out=tmp)
            out += tmp

    def backward(g):
        if xp.requires_grad:
            gx = np.zeros_like(a)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s] += \
                        g * w[None, :, i, j, None, None]
            xp._accum(gx)
        if weight.requires_grad:
            gw = np.empty_like(w)
            for i in range(k):
                for j in range(k):
                    win = a[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s]
                    gw[:, i, j] = np.einsum("bchw,bchw->c", g, win)
            weight._accum(gw[:, None])

    return make(out, (xp, weight), backward)


def _conv_im2col(xp: Tensor, weight: Tensor, s: int, groups: int, hw: tuple) -> Tensor:
    O, cg, k, _ = weight.shape
    B, C = xp.shape[:2]
    Ho, Wo = _out_size(hw[0], s), _out_size(hw[1], s)
    a = xp.data
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=a.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = a[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s]
    K = cg * k * k
    cols = cols.reshape(B, groups, K, Ho * Wo)
    wg = weight.data.reshape(groups, O // groups, K)
    out = np.matmul(wg[None], cols).reshape(B, O, Ho, Wo)

    def backward(g):
        gf = g.reshape(B, groups, O // groups, Ho * Wo)
        if weight.requires_grad:
            gw = np.zeros_like(wg)
            for b in range(B):
                gw += np.matmul(gf[b], cols[b].transpose(0, 2, 1))
            weight._accum(gw.reshape(weight.shape))
        if xp.requires_grad:
            gcols = np.matmul(wg.transpose(0, 2, 1)[None], gf).reshape(B, C, k, k, Ho, Wo)
            gx = np.zeros_like(a)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + (Ho - 1) * s + 1:s, j:j + (Wo - 1) * s + 1:s] += gcols[:, :, i, j]
            xp._accum(gx)

    return make(out, (xp, weight), backward)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def _normalize(x: np.ndarray, axes: tuple, eps: float):
    mean = x.mean(axis=axes, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xc * inv, inv, mean, var


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes: tuple):
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv * (g - gm - xhat * gxm)


def _affine(xhat: np.ndarray, gamma: Tensor, beta: Tensor, inputs: tuple, dx_fn) -> Tensor:
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        dx_fn(g * gd)

    return make(out, inputs + (gamma, beta), backward)


@dataclass(eq=False)
class NormState:
    """Batch-norm parameters, running statistics and mode.

    ``mode`` is ``train`` (batch statistics, running stats updated),
    ``eval`` or ``frozen`` (stored statistics, no updates; gradients still
    flow through the affine map).  ``ghost_size`` splits a training batch
    into independent normalization groups; ``"full"`` uses the whole batch.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = MOMENTUM
    mode: str = "train"
    ghost_size: int | str = "full"
    eps: float = EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float64, **kw) -> "NormState":
        return cls(Tensor(np.ones(channels, dtype), True), Tensor(np.zeros(channels, dtype), True),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)

    def __post_init__(self):
        if self.mode not in ("train", "eval", "frozen"):
            raise ConfigError(f"unknown norm mode {self.mode!r}")
        if not 0 < self.momentum < 1:
            raise ConfigError("momentum must lie in (0, 1)")
        if self.ghost_size != "full" and (not isinstance(self.ghost_size, int) or self.ghost_size < 1):
            raise ConfigError(f"ghost_size must be a positive int or 'full', got {self.ghost_size!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self)


def batch_norm(x: Tensor, state: NormState) -> Tensor:
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ConfigError(f"batch_norm: input shape {x.shape} does not match "
                          f"{state.channels} channels")
    if state.mode != "train":
        return _batch_norm_stored(x, state)
    B, C, H, W = x.shape
    g = B if state.ghost_size == "full" else state.ghost_size
    if g > B or B % g:
        raise ConfigError(f"ghost size {g} does not divide batch size {B}")
    xs = x.data.reshape(B // g, g, C, H, W)
    axes = (1, 3, 4)
    xhat, inv, mean, var = _normalize(xs, axes, state.eps)
    n = g * H * W
    m = state.momentum
    unbiased = var * (n / (n - 1)) if n > 1 else var
    state.running_mean[:] = (1 - m) * state.running_mean + m * mean.reshape(B // g, C).mean(axis=0)
    state.running_var[:] = (1 - m) * state.running_var + m * unbiased.reshape(B // g, C).mean(axis=0)

    def dx(gs):
        if x.requires_grad:
            gs = gs.reshape(xs.shape)
            x._accum(_normalize_backward(gs, xhat, inv, axes).reshape(x.shape))

    return _affine(xhat.reshape(x.shape), state.gamma, state.beta, (x,), dx)


def _batch_norm_stored(x: Tensor, state: NormState) -> Tensor:
    dt = x.dtype.type
    inv = (1.0 / np.sqrt(state.running_var + dt(state.eps))).astype(x.dtype)
    inv4 = inv[None, :, None, None]
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv4

    def dx(g):
        if x.requires_grad:
            x._accum(g * inv4)

    return _affine(xhat, state.gamma, state.beta, (x,), dx)


def fold_norm_into_conv(state: NormState, params: ConvParams) -> ConvParams:
    """Return one conv equivalent to ``params(batch_norm(x, state))``.

    Only valid with stored statistics.  Zero padding with k > 1 is refused
    because the padded border would not see the norm's shift.
    """
    if state.mode == "train":
        raise ContractError("cannot fold a batch norm that is in train mode")
    if params.in_channels != state.channels:
        raise ConfigError("norm channels do not match conv input channels")
    if params.padding == "zero" and params.kernel_size > 1:
        raise ContractError("folding into a zero-padded spatial conv is not exact")
    w = params.weight.data
    inv = 1.0 / np.sqrt(state.running_var + w.dtype.type(state.eps))
    a = state.gamma.data * inv
    b = state.beta.data - state.running_mean * a
    O, cg = w.shape[:2]
    og = O // params.groups
    # input channel seen by output o at slot ci is (o // og) * cg + ci
    in_idx = (np.arange(O) // og)[:, None] * cg + np.arange(cg)[None, :]
    new_w = w * a[in_idx][:, :, None, None]
    shift = (w * b[in_idx][:, :, None, None]).sum(axis=(1, 2, 3))
    bias = params.bias.data + shift if params.bias is not None else shift
    return ConvParams(Tensor(new_w.astype(w.dtype), True), Tensor(bias.astype(w.dtype), True),
                      params.stride, params.groups, params.padding)


def _stat_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple) -> Tensor:
    xhat, inv, _, _ = _normalize(x.data, axes, EPS)

    def dx(g):
        if x.requires_grad:
            x._accum(_normalize_backward(g, xhat, inv, axes))

    return _affine(xhat, gamma, beta, (x,), dx)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample normalization over (C, H, W) with per-channel affine."""
    return _stat_norm(x, gamma, beta, (1, 2, 3))


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample, per-channel normalization over (H, W)."""
    return _stat_norm(x, gamma, beta, (2, 3))


@dataclass(eq=False)
class StatNorm:
    """Layer or instance norm; statistics are recomputed at inference too."""

    kind: str
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, kind: str, channels: int, dtype=np.float64) -> "StatNorm":
        if kind not in ("layer", "instance"):
            raise ConfigError(f"unknown statistic norm {kind!r}")
        return cls(kind, Tensor(np.ones(channels, dtype), True), Tensor(np.zeros(channels, dtype), True))

    def __call__(self, x: Tensor) -> Tensor:
        fn = layer_norm if self.kind == "layer" else instance_norm
        return fn(x, self.gamma, self.beta)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def _unary(x: Tensor, out: np.ndarray, deriv: np.ndarray) -> Tensor:
    return make(out, (x,), lambda g: x._accum(g * deriv))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _unary(x, s, s * (1 - s))


def hard_sigmoid(x: Tensor) -> Tensor:
    """clamp(x / 6 + 1/2, 0, 1)."""
    dt = x.dtype.type
    out = np.clip(x.data / dt(6) + dt(0.5), 0, 1)
    deriv = np.where((x.data > -3) & (x.data < 3), dt(1 / 6), dt(0))
    return _unary(x, out, deriv)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary(x, t, 1 - t * t)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0).astype(x.dtype), mask.astype(x.dtype))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = x.data
    cdf = 0.5 * (1 + erf(a / math.sqrt(2)))
    pdf = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
    return _unary(x, a * cdf, cdf + a * pdf)


ACTIVATIONS = {"sigmoid": sigmoid, "hard_sigmoid": hard_sigmoid, "tanh": tanh,
               "relu": relu, "gelu": gelu}


# --------------------------------------------------------------------------
# pooling, softmax, channel conv, loss
# --------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    H, W = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    inv = x.dtype.type(1.0 / (H * W))
    return make(out, (x,), lambda g: x._accum(np.broadcast_to(g * inv, x.shape)))


def softmax_over_branches(logits: Tensor, n_branches: int) -> Tensor:
    """Softmax across ``n_branches`` equal channel blocks.

    Channel ``b * C + c`` holds branch ``b``'s logit for slot ``c``; the
    result has the same layout with weights summing to one per slot.
    """
    B, NC = logits.shape[:2]
    if NC % n_branches:
        raise ShapeError(f"{NC} channels do not split into {n_branches} branches")
    rest = logits.shape[2:]
    z = logits.data.reshape(B, n_branches, NC // n_branches, *rest)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        g = g.reshape(p.shape)
        logits._accum((p * (g - (g * p).sum(axis=1, keepdims=True))).reshape(logits.shape))

    return make(p.reshape(logits.shape), (logits,), backward)


def channel_conv1d(x: Tensor, weight: Tensor) -> Tensor:
    """Zero-padded 1-D correlation along the channel axis of a (B, C, 1, 1) map."""
    k = weight.shape[0]
    p = (k - 1) // 2
    B, C = x.shape[:2]
    v = np.pad(x.data.reshape(B, C), ((0, 0), (p, p)))
    out = np.zeros((B, C), dtype=x.dtype)
    for i in range(k):
        out += weight.data[i] * v[:, i:i + C]

    def backward(g):
        g = g.reshape(B, C)
        if x.requires_grad:
            gv = np.zeros_like(v)
            for i in range(k):
                gv[:, i:i + C] += weight.data[i] * g
            x._accum(gv[:, p:p + C].reshape(x.shape))
        if weight.requires_grad:
            weight._accum(np.array([(g * v[:, i:i + C]).sum() for i in range(k)], dtype=x.dtype))

    return make(out.reshape(x.shape), (x, weight), backward)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at an exact tie is 0."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"l1_loss shape mismatch {pred.shape} vs {t.shape}")
    d = pred.data - t
    n = d.size
    out = np.array(np.abs(d).mean(), dtype=pred.dtype)

    def backward(g):
        pred._accum(np.sign(d) * (g / n))

    return make(out, (pred,), backward)
