"""gUNet: a U-Net whose stages are stacks of gated convolution blocks and
whose skip connections are merged by selective-kernel fusion.

The network predicts a global residual: ``dehazed = hazy + R(hazy)``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, ShapeError
from .tensor import (Tensor, channel_slice, concat, crop2d, pad2d, pixel_shuffle,
                     pixel_unshuffle, resolve_dtype, scale)

PRESETS = {"T": 2, "S": 4, "B": 8, "D": 16}

NORM_KINDS = ("batch", "layer", "instance")
GATE_KINDS = ("sigmoid", "hard_sigmoid", "tanh")
NONLIN_KINDS = ("gating", "relu_sum", "gelu_sum")
FUSION_KINDS = ("sk", "concat", "sum")
ATTENTION_KINDS = ("none", "se", "eca")

SK_REDUCTION = 8
SE_REDUCTION = 8
MIN_HIDDEN = 4
INIT_STD = 0.02  # 1-d kernels (ECA)


def _round_even(v: float) -> int:
    return max(2, 2 * int(round(v / 2)))


def reduced_width(channels: int, ratio: int) -> int:
    return max(channels // ratio, MIN_HIDDEN)


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    t = int(abs((math.log2(channels) + b) / gamma))
    return t if t % 2 else t + 1


@dataclass(frozen=True)
class ModelConfig:
    base_blocks: int = 2
    base_width: int = 24
    dw_kernel: int = 5
    n_stages: int = 7
    norm_kind: str = "batch"
    gate_kind: str = "sigmoid"
    nonlin_ablation: str = "gating"
    fusion_kind: str = "sk"
    extra_attention: str = "none"
    width_multiplier: float = 1.0
    padding: str = "reflect"

    def __post_init__(self):
        for name in ("base_blocks", "base_width", "dw_kernel", "n_stages"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.dw_kernel % 2 == 0:
            raise ConfigError(f"dw_kernel must be odd, got {self.dw_kernel}")
        if self.n_stages < 3 or self.n_stages % 2 == 0:
            raise ConfigError(f"n_stages must be odd and >= 3, got {self.n_stages}")
        for name, allowed in (("norm_kind", NORM_KINDS), ("gate_kind", GATE_KINDS),
                              ("nonlin_ablation", NONLIN_KINDS), ("fusion_kind", FUSION_KINDS),
                              ("extra_attention", ATTENTION_KINDS), ("padding", ("reflect", "zero"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.width_multiplier > 0:
            raise ConfigError("width_multiplier must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            m = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}") from None
        return cls(**{"base_blocks": m, "base_width": 24, "dw_kernel": 5, **overrides})

    @property
    def levels(self) -> int:
        return (self.n_stages - 1) // 2

    def level_width(self, i: int) -> int:
        base = self.base_width * 2 ** i
        if self.width_multiplier == 1:
            return base
        return _round_even(self.width_multiplier * base)

    def stages(self) -> list[tuple[str, int, int]]:
        """(name, width, blocks) for every stage in forward order."""
        L = self.levels
        enc = [(f"enc{i}", self.level_width(i), self.base_blocks) for i in range(L)]
        mid = [("mid", self.level_width(L), 2 * self.base_blocks)]
        dec = [(f"dec{i}", self.level_width(i), self.base_blocks) for i in reversed(range(L))]
        return enc + mid + dec

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


# --------------------------------------------------------------------------
# parameter creation
# --------------------------------------------------------------------------

def depth_gain(cfg: ModelConfig) -> float:
    """Init gain (8 * total blocks) ** -1/4, keeping deep residual stacks stable."""
    return (8 * sum(nb for _, _, nb in cfg.stages())) ** -0.25


class Init:
    """Deterministic parameter factory; draws happen in construction order."""

    def __init__(self, seed: int, dtype, gain: float = 1.0):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.gain = gain

    def trunc_normal(self, shape, std=INIT_STD) -> np.ndarray:
        out = self.rng.standard_normal(shape)
        bad = np.abs(out) > 2
        while bad.any():
            out[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(out) > 2
        return (out * std).astype(self.dtype)

    def conv(self, cin, cout, k=1, groups=1, padding="reflect", zero=False) -> F.ConvParams:
        shape = (cout, cin // groups, k, k)
        # fan-scaled, shrunk with network depth
        std = self.gain * np.sqrt(2.0 / ((cin // groups) * k * k + cout * k * k))
        w = np.zeros(shape, self.dtype) if zero else self.trunc_normal(shape, std)
        return F.ConvParams(Tensor(w, True), Tensor(np.zeros(cout, self.dtype), True),
                            groups=groups, padding=padding)

    def norm(self, kind: str, channels: int):
        if kind == "batch":
            return F.NormState.create(channels, self.dtype)
        return F.StatNorm.create(kind, channels, self.dtype)


class Module:
    """Container with an ordered mapping of named sub-layers."""

    def __init__(self):
        self.layers: dict[str, object] = {}

    def add(self, name: str, layer):
        self.layers[name] = layer
        return layer

    def walk(self, prefix: str = "") -> Iterator[tuple[str, object]]:
        for name, layer in self.layers.items():
            full = f"{prefix}{name}"
            if isinstance(layer, Module):
                yield from layer.walk(full + ".")
            elif layer is not None:
                yield full, layer


Probe = Callable[[str, Tensor], None]


class GConvBlock(Module):
    """x + PW3(gate(PW1(n)) * DW(PW2(n))) with n = Norm(x)."""

    def __init__(self, channels: int, cfg: ModelConfig, init: Init):
        super().__init__()
        C, pad = channels, cfg.padding
        self.channels = C
        self.nonlin = cfg.nonlin_ablation
        self.gate = F.ACTIVATIONS[cfg.gate_kind]
        self.add("norm", init.norm(cfg.norm_kind, C))
        self.add("pw1", init.conv(C, C))
        self.add("pw2", init.conv(C, C))
        self.add("dw", init.conv(C, C, cfg.dw_kernel, groups=C, padding=pad))
        self.add("pw3", init.conv(C, C))
        if cfg.extra_attention == "se":
            self.add("attn", SEModule(C, init))
        elif cfg.extra_attention == "eca":
            self.add("attn", ECAModule(C, init))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"gconv block expects {self.channels} channels, got {x.shape[1]}")
        L = self.layers
        n = L["norm"](x) if L["norm"] is not None else x
        a = L["pw1"](n)
        v = L["dw"](L["pw2"](n))
        if self.nonlin == "gating":
            y = self.gate(a) * v
        else:
            act = F.relu if self.nonlin == "relu_sum" else F.gelu
            y = act(a) + v
        y = L["pw3"](y)
        if "attn" in L:
            y = L["attn"](y)
        return x + y


class SEModule(Module):
    def __init__(self, channels: int, init: Init):
        super().__init__()
        d = reduced_width(channels, SE_REDUCTION)
        self.add("reduce", init.conv(channels, d))
        self.add("expand", init.conv(d, channels))

    def __call__(self, x: Tensor) -> Tensor:
        s = F.global_avg_pool(x)
        w = F.sigmoid(self.layers["expand"](F.relu(self.layers["reduce"](s))))
        return x * w


class ECAModule(Module):
    def __init__(self, channels: int, init: Init):
        super().__init__()
        k = eca_kernel_size(channels)
        self.add("weight", Tensor(init.trunc_normal((k,)), True))

    def __call__(self, x: Tensor) -> Tensor:
        s = F.global_avg_pool(x)
        return x * F.sigmoid(F.channel_conv1d(s, self.layers["weight"]))


def _check_pair(skip: Tensor, main: Tensor):
    if skip.shape[0] != main.shape[0] or skip.shape[2:] != main.shape[2:]:
        raise ShapeError(f"fusion inputs disagree: skip {skip.shape} vs main {main.shape}")


class SKFusion(Module):
    """Per-channel convex combination of the projected skip and main path."""

    def __init__(self, skip_ch: int, channels: int, init: Init):
        super().__init__()
        self.channels = channels
        d = reduced_width(channels, SK_REDUCTION)
        self.add("proj", init.conv(skip_ch, channels))
        self.add("mlp1", init.conv(channels, d))
        self.add("mlp2", init.conv(d, 2 * channels))

    def weights(self, skip_hat: Tensor, main: Tensor) -> Tensor:
        s = F.global_avg_pool(skip_hat + main)
        logits = self.layers["mlp2"](F.relu(self.layers["mlp1"](s)))
        return F.softmax_over_branches(logits, 2)

    def __call__(self, skip: Tensor, main: Tensor) -> Tensor:
        _check_pair(skip, main)
        C = self.channels
        skip_hat = self.layers["proj"](skip)
        w = self.weights(skip_hat, main)
        return channel_slice(w, 0, C) * skip_hat + channel_slice(w, C, 2 * C) * main


class ConcatFusion(Module):
    def __init__(self, skip_ch: int, channels: int, init: Init):
        super().__init__()
        self.add("proj", init.conv(skip_ch + channels, channels))

    def __call__(self, skip: Tensor, main: Tensor) -> Tensor:
        _check_pair(skip, main)
        return self.layers["proj"](concat([skip, main], axis=1))


class SumFusion(Module):
    def __init__(self, skip_ch: int, channels: int, init: Init):
        super().__init__()
        self.add("proj", init.conv(skip_ch, channels))

    def __call__(self, skip: Tensor, main: Tensor) -> Tensor:
        _check_pair(skip, main)
        return self.layers["proj"](skip) + main


FUSIONS = {"sk": SKFusion, "concat": ConcatFusion, "sum": SumFusion}


class Downsample(Module):
    """Pixel-unshuffle by 2, then a pointwise conv to the next width."""

    def __init__(self, cin: int, cout: int, init: Init):
        super().__init__()
        self.add("proj", init.conv(4 * cin, cout))

    def __call__(self, x: Tensor) -> Tensor:
        return self.layers["proj"](pixel_unshuffle(x, 2))


class Upsample(Module):
    """Pointwise conv to 4x the target width, then pixel-shuffle by 2."""

    def __init__(self, cin: int, cout: int, init: Init):
        super().__init__()
        self.add("proj", init.conv(cin, 4 * cout))

    def __call__(self, x: Tensor) -> Tensor:
        return pixel_shuffle(self.layers["proj"](x), 2)


class Stage(Module):
    def __init__(self, channels: int, blocks: int, cfg: ModelConfig, init: Init):
        super().__init__()
        for j in range(blocks):
            self.add(f"block{j}", GConvBlock(channels, cfg, init))

    def __call__(self, x: Tensor, probe: Probe | None = None, prefix: str = "") -> Tensor:
        for name, block in self.layers.items():
            x = block(x)
            if probe:
                probe(prefix + name, x)
        return x


class GUNet(Module):
    def __init__(self, cfg: ModelConfig, init: Init, head_init: str = "zero"):
        super().__init__()
        self.config = cfg
        L = cfg.levels
        w = [cfg.level_width(i) for i in range(L + 1)]
        blocks = {name: nb for name, _, nb in cfg.stages()}
        init.gain = depth_gain(cfg)
        self.add("stem", init.conv(3, w[0], 3, padding=cfg.padding))
        for i in range(L):
            self.add(f"enc{i}", Stage(w[i], blocks[f"enc{i}"], cfg, init))
            self.add(f"down{i}", Downsample(w[i], w[i + 1], init))
        self.add("mid", Stage(w[L], blocks["mid"], cfg, init))
        for i in reversed(range(L)):
            self.add(f"up{i}", Upsample(w[i + 1], w[i], init))
            self.add(f"fuse{i}", FUSIONS[cfg.fusion_kind](w[i], w[i], init))
            self.add(f"dec{i}", Stage(w[i], blocks[f"dec{i}"], cfg, init))
        if head_init not in ("zero", "random"):
            raise ConfigError(f"head_init must be 'zero' or 'random', got {head_init!r}")
        self.add("head", init.conv(w[0], 3, 3, padding=cfg.padding, zero=head_init == "zero"))

    @property
    def multiple(self) -> int:
        return 2 ** self.config.levels

    def __call__(self, x: Tensor, probe: Probe | None = None) -> Tensor:
        """Residual map for an input already in [-1, 1] with H, W divisible by 2**levels."""
        Ls = self.layers
        note = probe or (lambda name, t: None)
        x = Ls["stem"](x)
        note("stem", x)
        skips = []
        for i in range(self.config.levels):
            x = Ls[f"enc{i}"](x, probe, f"enc{i}.")
            skips.append(x)
            x = Ls[f"down{i}"](x)
            note(f"down{i}", x)
        x = Ls["mid"](x, probe, "mid.")
        for i in reversed(range(self.config.levels)):
            x = Ls[f"up{i}"](x)
            note(f"up{i}", x)
            x = Ls[f"fuse{i}"](skips[i], x)
            note(f"fuse{i}", x)
            x = Ls[f"dec{i}"](x, probe, f"dec{i}.")
        x = Ls["head"](x)
        note("head", x)
        return x

    def norm_states(self) -> list[F.NormState]:
        return [layer for _, layer in self.walk() if isinstance(layer, F.NormState)]

    def set_norm_mode(self, mode: str):
        for st in self.norm_states():
            if mode not in ("train", "eval", "frozen"):
                raise ConfigError(f"unknown norm mode {mode!r}")
            st.mode = mode

    def set_ghost_size(self, ghost):
        for st in self.norm_states():
            st.ghost_size = ghost

    def blocks(self) -> Iterator[GConvBlock]:
        def rec(m):
            for layer in m.layers.values():
                if isinstance(layer, GConvBlock):
                    yield layer
                elif isinstance(layer, Module):
                    yield from rec(layer)
        return rec(self)


# --------------------------------------------------------------------------
# parameter store
# --------------------------------------------------------------------------

class ParamStore:
    """Named learnable arrays plus batch-norm running statistics.

    Tensors are shared with the network, so in-place updates to
    ``params[name].data`` change the model.
    """

    def __init__(self, net: GUNet, dtype):
        self.config = net.config
        self.dtype = np.dtype(dtype)
        self.fingerprint = net.config.fingerprint()
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, F.NormState] = {}
        for name, layer in net.walk():
            if isinstance(layer, F.ConvParams):
                self._put(f"{name}.weight", layer.weight)
                if layer.bias is not None:
                    self._put(f"{name}.bias", layer.bias)
            elif isinstance(layer, (F.NormState, F.StatNorm)):
                self._put(f"{name}.weight", layer.gamma)
                self._put(f"{name}.bias", layer.beta)
                if isinstance(layer, F.NormState):
                    self.norms[name] = layer
            elif isinstance(layer, Tensor):
                self._put(name, layer)

    def _put(self, name: str, t: Tensor):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        t.name = name
        self.params[name] = t

    def __len__(self):
        return len(self.params)

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def decays(self, name: str) -> bool:
        """Weight decay applies to conv kernels only, not biases or norm affines."""
        return self.params[name].ndim == 4

    def arrays(self) -> dict[str, np.ndarray]:
        """Every array that belongs in a checkpoint, in deterministic order."""
        out = {name: t.data for name, t in self.params.items()}
        for name, st in self.norms.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def restore(self, arrays: dict[str, np.ndarray]):
        current = self.arrays()
        if set(arrays) != set(current):
            raise ConfigError("array names do not match this model")
        for k, v in arrays.items():
            if v.shape != current[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} vs {current[k].shape}")
        for k, v in arrays.items():
            current[k][...] = v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def bit_equal(self, other: "ParamStore") -> bool:
        a, b = self.arrays(), other.arrays()
        return list(a) == list(b) and all(
            a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)


def build_gunet(config: ModelConfig, seed: int = 0, dtype="double",
                head_init: str = "zero") -> tuple[GUNet, ParamStore]:
    dt = resolve_dtype(dtype)
    net = GUNet(config, Init(seed, dt), head_init=head_init)
    return net, ParamStore(net, dt)


def to_network_range(img: np.ndarray) -> np.ndarray:
    return img * 2 - 1


def forward_dehaze(net: GUNet, hazy, probe: Probe | None = None) -> Tensor:
    """Dehaze a batch of [0, 1] images shaped (B, 3, H, W) of any spatial size.

    The input is mapped to [-1, 1], reflect-padded to a multiple of
    ``2**levels``, and the predicted residual is cropped back and added to
    the hazy input on the [0, 1] scale.  No clamping happens here.
    """
    h = hazy.data if isinstance(hazy, Tensor) else np.asarray(hazy)
    if h.ndim == 3:
        h = h[None]
    if h.ndim != 4 or h.shape[1] != 3:
        raise ShapeError(f"forward_dehaze expects (B, 3, H, W) images, got {h.shape}")
    H, W = h.shape[2:]
    m = net.multiple
    ph, pw = -H % m, -W % m
    x = pad2d(Tensor(to_network_range(h)), 0, ph, 0, pw, "reflect")
    r = crop2d(net(x, probe), H, W)
    return Tensor(h) + scale(r, 0.5)


def fold_network(net: GUNet) -> GUNet:
    """Copy of an eval/frozen batch-norm network with each block norm
    merged into the two pointwise convs that consume it."""
    if net.config.norm_kind != "batch":
        raise ContractError("only batch-norm networks can be folded")
    out = copy.deepcopy(net)
    for block in out.blocks():
        st = block.layers["norm"]
        block.layers["pw1"] = F.fold_norm_into_conv(st, block.layers["pw1"])
        block.layers["pw2"] = F.fold_norm_into_conv(st, block.layers["pw2"])
        block.layers["norm"] = None
    return out
