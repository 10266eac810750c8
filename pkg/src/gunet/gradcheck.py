"""Central finite-difference gradient checks.

A check contracts the op output with a fixed random cotangent, runs the
analytic backward once, then perturbs every element of every checked input.
The reported error for each input is ``|a - n| / max(|a|, |n|)`` in the
Euclidean norm over all of its elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradResult:
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol

    def line(self) -> str:
        flag = "PASS" if self.ok else "FAIL"
        return f"{flag}  {self.name:<40s} rel_err={self.rel_err:.3e} (tol {self.tol:.0e})"


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-12) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], names: Sequence[str] | None = None,
          h: float | None = None, tol: float = 1e-4, seed: int = 0,
          label: str = "") -> list[GradResult]:
    """Compare backward() against central differences for ``fn(*inputs)``."""
    dtype = inputs[0].dtype
    if h is None:
        h = 1e-6 if dtype == np.float64 else 1e-2
    names = names or [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(out.shape).astype(dtype)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data.astype(np.float64) * cot))

    out.backward(cot)
    results = []
    for t, name in zip(inputs, names):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numeric_grad(scalar, t.data, h)
        results.append(GradResult(f"{label}{name}", rel_error(analytic, numeric), tol))
    return results


# --------------------------------------------------------------------------
# suites used by the CLI and the tests
# --------------------------------------------------------------------------

def _t(rng, *shape, lo=None) -> Tensor:
    a = rng.standard_normal(shape)
    if lo is not None:
        a = np.sign(a) * (np.abs(a) + lo)  # keep away from kinks at zero
    return Tensor(a, requires_grad=True)


def op_cases(seed: int = 0) -> list[tuple[str, Callable, list[Tensor]]]:
    """(label, fn, inputs) for every differentiable tensor-core op."""
    from . import functional as F
    from . import tensor as T

    rng = np.random.default_rng(seed)
    x = lambda *s, **k: _t(rng, *s, **k)  # noqa: E731
    cases = [
        ("add", lambda a, b: T.add(a, b), [x(2, 3, 4, 4), x(1, 3, 1, 1)]),
        ("mul", lambda a, b: T.mul(a, b), [x(2, 3, 4, 4), x(2, 3, 1, 1)]),
        ("neg", T.neg, [x(1, 2, 3, 3)]),
        ("scale", lambda a: T.scale(a, 0.5), [x(1, 2, 3, 3)]),
        ("concat", lambda a, b: T.concat([a, b], 1), [x(2, 2, 3, 3), x(2, 3, 3, 3)]),
        ("channel_slice", lambda a: T.channel_slice(a, 1, 3), [x(2, 4, 3, 3)]),
        ("pad2d_reflect", lambda a: T.pad2d(a, 2, 1, 3, 0, "reflect"), [x(1, 2, 3, 3)]),
        ("pad2d_zero", lambda a: T.pad2d(a, 1, 2, 0, 1, "zero"), [x(1, 2, 3, 3)]),
        ("crop2d", lambda a: T.crop2d(a, 3, 2), [x(1, 2, 5, 4)]),
        ("pixel_unshuffle", lambda a: T.pixel_unshuffle(a, 2), [x(1, 2, 4, 6)]),
        ("pixel_shuffle", lambda a: T.pixel_shuffle(a, 2), [x(1, 8, 2, 3)]),
    ]

    def conv(label, cin, cout, k, groups=1, stride=1, padding="reflect", hw=(5, 6)):
        w, b = x(cout, cin // groups, k, k), x(cout)

        def fn(a, w, b):
            return F.conv2d(a, F.ConvParams(w, b, stride=stride, groups=groups, padding=padding))
        cases.append((label, fn, [x(2, cin, *hw), w, b]))

    conv("conv_pointwise", 3, 4, 1)
    conv("conv_depthwise", 3, 3, 5, groups=3)
    conv("conv_depthwise_zero", 3, 3, 3, groups=3, padding="zero")
    conv("conv_depthwise_stride2", 2, 2, 3, groups=2, stride=2)
    conv("conv_dense_3x3", 3, 2, 3)
    conv("conv_grouped", 4, 6, 3, groups=2, padding="zero")
    conv("conv_dense_stride2", 2, 3, 3, stride=2, hw=(5, 5))

    def bn(mode, ghost="full"):
        def fn(a, g, b):
            st = F.NormState.create(3, np.float64, mode=mode, ghost_size=ghost)
            st.gamma, st.beta = g, b
            if mode != "train":
                st.running_mean[:] = [0.1, -0.2, 0.3]
                st.running_var[:] = [0.5, 1.5, 2.0]
            return F.batch_norm(a, st)
        return fn

    for label, fn in (("batch_norm_train", bn("train")), ("batch_norm_ghost2", bn("train", 2)),
                      ("batch_norm_eval", bn("eval")), ("batch_norm_frozen", bn("frozen"))):
        cases.append((label, fn, [x(4, 3, 3, 3), x(3), x(3)]))
    cases += [
        ("layer_norm", F.layer_norm, [x(2, 3, 3, 4), x(3), x(3)]),
        ("instance_norm", F.instance_norm, [x(2, 3, 3, 4), x(3), x(3)]),
        ("sigmoid", F.sigmoid, [x(2, 3, 3, 3)]),
        ("hard_sigmoid", F.hard_sigmoid, [x(2, 3, 3, 3)]),
        ("tanh", F.tanh, [x(2, 3, 3, 3)]),
        ("relu", F.relu, [x(2, 3, 3, 3, lo=1e-3)]),
        ("gelu", F.gelu, [x(2, 3, 3, 3)]),
        ("global_avg_pool", F.global_avg_pool, [x(2, 3, 4, 5)]),
        ("softmax_over_branches", lambda a: F.softmax_over_branches(a, 2), [x(2, 6, 1, 1)]),
        ("channel_conv1d", F.channel_conv1d, [x(2, 6, 1, 1), x(3)]),
    ]
    target = rng.standard_normal((2, 3, 4, 4))
    cases.append(("l1_loss", lambda a: F.l1_loss(a, target), [x(2, 3, 4, 4)]))
    return cases


def run_ops(seed: int = 0, tol: float = 1e-4) -> list[GradResult]:
    out = []
    for label, fn, inputs in op_cases(seed):
        out += check(fn, inputs, [f"[{i}]" for i in range(len(inputs))], tol=tol, seed=seed,
                     label=f"op.{label}")
    return out


def _params_check(fn, named: dict[str, Tensor], label: str, tol: float, seed: int,
                  h: float | None = None):
    return check(lambda *_: fn(), list(named.values()), list(named), h=h, tol=tol, seed=seed,
                 label=label)


def run_blocks(seed: int = 0, tol: float = 1e-4) -> list[GradResult]:
    """Every block variant and fusion/sampling module, inputs and parameters."""
    from .arch import (Downsample, GConvBlock, Init, ModelConfig, Upsample, FUSIONS)

    rng = np.random.default_rng(seed)
    C = 8
    variants = [{}, {"gate_kind": "hard_sigmoid"}, {"gate_kind": "tanh"},
                {"nonlin_ablation": "relu_sum"}, {"nonlin_ablation": "gelu_sum"},
                {"norm_kind": "layer"}, {"norm_kind": "instance"}, {"dw_kernel": 3},
                {"extra_attention": "se"}, {"extra_attention": "eca"}]
    out = []

    def named(module, prefix):
        d = {}
        for name, layer in module.walk():
            if isinstance(layer, Tensor):
                d[f"{prefix}.{name}"] = layer
            elif hasattr(layer, "weight"):
                d[f"{prefix}.{name}.weight"] = layer.weight
                if layer.bias is not None:
                    d[f"{prefix}.{name}.bias"] = layer.bias
            elif hasattr(layer, "gamma"):
                d[f"{prefix}.{name}.weight"] = layer.gamma
                d[f"{prefix}.{name}.bias"] = layer.beta
        return d

    for v in variants:
        cfg = ModelConfig(base_width=C, **v)
        block = GConvBlock(C, cfg, Init(seed, np.float64))
        tag = "block." + ("_".join(f"{k}={val}" for k, val in v.items()) or "default")
        xin = Tensor(rng.standard_normal((2, C, 5, 5)), requires_grad=True)
        out += _params_check(lambda: block(xin), {"x": xin, **named(block, "")}, tag + ".", tol, seed)
    for kind, cls in FUSIONS.items():
        mod = cls(C, C, Init(seed, np.float64))
        s = Tensor(rng.standard_normal((2, C, 4, 4)), requires_grad=True)
        m = Tensor(rng.standard_normal((2, C, 4, 4)), requires_grad=True)
        out += _params_check(lambda: mod(s, m), {"skip": s, "main": m, **named(mod, "")},
                             f"fusion.{kind}.", tol, seed)
    for label, mod, shape in (("down", Downsample(4, 8, Init(seed, np.float64)), (2, 4, 4, 4)),
                              ("up", Upsample(8, 4, Init(seed, np.float64)), (2, 8, 2, 2))):
        xin = Tensor(rng.standard_normal(shape), requires_grad=True)
        out += _params_check(lambda: mod(xin), {"x": xin, **named(mod, "")}, f"{label}.", tol, seed)
    return out


def run_model(seed: int = 0, tol: float = 1e-3, size: int = 16, h: float | None = None) -> list[GradResult]:
    """End-to-end check of the micro network (N=4, M=1, 5 stages), all parameters."""
    from .arch import ModelConfig, build_gunet, forward_dehaze

    cfg = ModelConfig(base_blocks=1, base_width=4, n_stages=5)
    net, store = build_gunet(cfg, seed=seed, dtype="double", head_init="random")
    rng = np.random.default_rng(seed)
    # zero-initialized biases put ReLU inputs exactly on the kink; move to a generic point
    for t in store.params.values():
        if t.ndim == 1:
            t.data += rng.normal(0, 0.1, t.shape)
    hazy = rng.uniform(0, 1, (2, 3, size, size))
    return _params_check(lambda: forward_dehaze(net, hazy), dict(store.params), "model.", tol, seed, h)


SCOPES = {"op": run_ops, "block": run_blocks, "model": run_model}
