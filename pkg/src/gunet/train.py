"""Desk-scale training: AdamW with linear warmup and cosine annealing,
a FrozenBN tail, random crops, validation and checkpointing."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .arch import GUNet, ModelConfig, ParamStore, forward_dehaze
from .errors import ConfigError, DataIOError, FingerprintError, NumericError
from .functional import l1_loss
from .haze import psnr, ssim
from .tensor import Tensor, no_grad, resolve_dtype

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "step", "lr", "train_l1", "val_psnr", "val_ssim")


@dataclass
class TrainConfig:
    epochs: int = 50
    samples_per_epoch: int = 512
    batch_size: int = 8
    lr_init: float = 4e-4
    lr_min: float = 4e-6
    warmup_epochs: int = 3
    frozen_bn_epochs: int = 10
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    crop: int = 64
    seed: int = 0
    ghost_norm_size: int | str = "full"
    precision: str = "double"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("epochs", "warmup_epochs", "frozen_bn_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.samples_per_epoch < self.batch_size:
            raise ConfigError("need batch_size >= 1 and samples_per_epoch >= batch_size")
        if self.warmup_epochs + self.frozen_bn_epochs > self.epochs:
            raise ConfigError("warmup_epochs + frozen_bn_epochs exceeds epochs")
        if not 0 < self.lr_min <= self.lr_init:
            raise ConfigError("need 0 < lr_min <= lr_init")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.crop < 1:
            raise ConfigError("crop must be positive")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double' (mixed precision is not supported)")
        g = self.ghost_norm_size
        if g != "full":
            if not isinstance(g, int) or g < 1 or self.batch_size % g:
                raise ConfigError(f"ghost_norm_size {g!r} must be 'full' or divide batch_size")

    @property
    def steps_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate for optimizer step ``step`` (1-based).

    Linear ramp from 0 to lr_init over the warmup steps, then cosine
    annealing that reaches lr_min exactly at ``total_steps``.
    """
    warm = min(config.warmup_steps, total_steps)
    if warm and step <= warm:
        return config.lr_init * step / warm
    span = total_steps - warm
    if span <= 0:
        return config.lr_min
    progress = min(max((step - warm) / span, 0.0), 1.0)
    return config.lr_min + (config.lr_init - config.lr_min) * 0.5 * (1 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                 lr: float, b1: float, b2: float, eps: float, wd: float):
    """In-place AdamW update of one array (decoupled decay)."""
    if wd:
        p -= (lr * wd) * p
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * (g * g)
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def adamw_update_loop(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                      lr: float, b1: float, b2: float, eps: float, wd: float):
    """Element-by-element reference for :func:`adamw_update`."""
    pf, gf, mf, vf = p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    for i in range(pf.size):
        x = float(pf[i])
        gi = float(gf[i])
        if wd:
            x = x - (lr * wd) * x
        mi = b1 * float(mf[i]) + (1 - b1) * gi
        vi = b2 * float(vf[i]) + (1 - b2) * (gi * gi)
        mf[i], vf[i] = mi, vi
        pf[i] = x - lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def adamw_step(store: ParamStore, state: AdamState, lr: float, config: TrainConfig,
               impl: str = "vectorized") -> AdamState:
    update = adamw_update if impl == "vectorized" else adamw_update_loop
    state.t += 1
    b1, b2 = config.betas
    for name, p in store.params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        wd = config.weight_decay if store.decays(name) else 0.0
        update(p.data, g, state.m[name], state.v[name], state.t, lr, b1, b2, config.adam_eps, wd)
    return state


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = 0.0
    for p in store.params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    total = math.sqrt(total)
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-6)
        for p in store.params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(s)
    return total


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

def _as_pairs(dataset) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for item in dataset:
        if hasattr(item, "clean"):
            out.append((item.clean, item.hazy))
        else:
            out.append((item[0], item[1]))
    return out


def epoch_batches(pairs, config: TrainConfig, epoch: int, dtype):
    """Yield (hazy, clean) crop batches for one epoch.

    The visiting order comes from the (seed, epoch) stream and each crop
    from its own (seed, epoch, sample) stream.
    """
    n = len(pairs)
    rng = np.random.default_rng([config.seed, epoch])
    reps = -(-config.samples_per_epoch // n)
    order = np.concatenate([rng.permutation(n) for _ in range(reps)])
    c = config.crop
    for s in range(config.steps_per_epoch):
        hz, cl = [], []
        for j in range(config.batch_size):
            i = s * config.batch_size + j
            clean, hazy = pairs[order[i]]
            H, W = clean.shape[1:]
            if c > H or c > W:
                raise ConfigError(f"crop {c} larger than image {H}x{W}")
            r = np.random.default_rng([config.seed, epoch, i])
            y, x = r.integers(0, H - c + 1), r.integers(0, W - c + 1)
            sl = (slice(None), slice(y, y + c), slice(x, x + c))
            a, b = hazy[sl], clean[sl]
            if r.random() < 0.5:
                a, b = a[:, :, ::-1], b[:, :, ::-1]
            hz.append(a)
            cl.append(b)
        yield np.stack(hz).astype(dtype), np.stack(cl).astype(dtype)


def first_nonfinite_layer(net: GUNet, hazy: np.ndarray) -> str | None:
    found: list[str] = []

    def probe(name, t):
        if not found and not np.all(np.isfinite(t.data)):
            found.append(name)

    with no_grad():
        forward_dehaze(net, hazy, probe)
    return found[0] if found else None


def evaluate(net: GUNet, pairs, dtype, batch: int = 16) -> tuple[float, float]:
    """Mean PSNR and SSIM of the clamped network output over ``pairs``."""
    ps, ss = [], []
    with no_grad():
        for lo in range(0, len(pairs), batch):
            chunk = pairs[lo:lo + batch]
            hazy = np.stack([h for _, h in chunk]).astype(dtype)
            out = np.clip(forward_dehaze(net, hazy).data.astype(np.float64), 0, 1)
            for o, (c, _) in zip(out, chunk):
                ps.append(psnr(o, c))
                ss.append(ssim(o, c))
    return float(np.mean(ps)), float(np.mean(ss))


def write_metrics(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], r["step"], *(repr(float(r[k])) for k in METRIC_FIELDS[2:])])
    return path


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k in ("epoch", "step") else float(r[k])) for k in METRIC_FIELDS}
            for r in rows]


def train_loop(net: GUNet, store: ParamStore, dataset, config: TrainConfig, val=None,
               metrics_path=None, checkpoint_path=None,
               on_epoch: Callable[[dict], None] | None = None) -> tuple[ParamStore, list[dict]]:
    """Train ``net`` in place; returns the final store and the per-epoch log.

    The best validation model is written to ``checkpoint_path`` when given.
    Raises :class:`NumericError` naming the first layer with non-finite
    output if the loss stops being finite.
    """
    dtype = resolve_dtype(config.precision)
    if store.dtype != dtype:
        raise ConfigError(f"model dtype {store.dtype} does not match precision {config.precision}")
    pairs = _as_pairs(dataset)
    val_pairs = _as_pairs(val) if val is not None else []
    rows: list[dict] = []
    if config.epochs == 0:
        return store, rows
    if not pairs:
        raise ConfigError("training set is empty")
    state = AdamState()
    total = config.total_steps
    frozen_from = config.epochs - config.frozen_bn_epochs
    best = -math.inf
    step = 0
    net.set_ghost_size(config.ghost_norm_size)
    for epoch in range(config.epochs):
        net.set_norm_mode("frozen" if epoch >= frozen_from else "train")
        losses = []
        lr = 0.0
        for hazy, clean in epoch_batches(pairs, config, epoch, dtype):
            step += 1
            lr = lr_schedule(step, total, config)
            store.zero_grad()
            loss = l1_loss(forward_dehaze(net, hazy), clean)
            value = loss.item()
            if not math.isfinite(value):
                layer = first_nonfinite_layer(net, hazy)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}; "
                                   f"first non-finite output: {layer or 'loss only'}")
            loss.backward()
            clip_grad_norm(store, config.grad_clip)
            adamw_step(store, state, lr, config)
            losses.append(value)
        row = {"epoch": epoch, "step": step, "lr": lr, "train_l1": float(np.mean(losses)),
               "val_psnr": math.nan, "val_ssim": math.nan}
        if val_pairs:
            net.set_norm_mode("eval")
            row["val_psnr"], row["val_ssim"] = evaluate(net, val_pairs, dtype)
            if checkpoint_path is not None and row["val_psnr"] > best:
                best = row["val_psnr"]
                save_checkpoint(store, checkpoint_path)
        rows.append(row)
        log.info("epoch %d step %d lr %.3g l1 %.5f val_psnr %.3f", epoch, step, lr,
                 row["train_l1"], row["val_psnr"])
        if metrics_path is not None:
            write_metrics(rows, metrics_path)
        if on_epoch:
            on_epoch(row)
    net.set_norm_mode("eval")
    if checkpoint_path is not None and not val_pairs:
        save_checkpoint(store, checkpoint_path)
    return store, rows


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"GUNT"
VERSION = 1
_HEAD = struct.Struct("<4sI32sQ")


def checkpoint_bytes(store: ParamStore) -> bytes:
    arrays = store.arrays()
    tensors, offset = {}, 0
    for name, a in arrays.items():
        dt = a.dtype.newbyteorder("<")
        tensors[name] = {"offset": offset, "dtype": dt.str, "shape": list(a.shape)}
        offset += a.nbytes
    manifest = json.dumps({"config": store.config.to_dict(), "dtype": store.dtype.name,
                           "tensors": tensors}, separators=(",", ":")).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, store.fingerprint, len(manifest)), manifest]
    parts += [np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes() for a in arrays.values()]
    return b"".join(parts)


def save_checkpoint(store: ParamStore, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(store))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[ModelConfig, str, bytes, dict[str, np.ndarray]]:
    """Parse a checkpoint file: (config, dtype name, fingerprint, arrays)."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEAD.size:
        raise DataIOError(f"{path}: truncated checkpoint")
    magic, version, fp, mlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise DataIOError(f"{path}: not a GUNT checkpoint")
    if version != VERSION:
        raise DataIOError(f"{path}: unsupported checkpoint version {version}")
    start = _HEAD.size + mlen
    try:
        manifest = json.loads(raw[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataIOError(f"{path}: corrupt manifest ({e})") from e
    arrays = {}
    for name, meta in manifest["tensors"].items():
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"], dtype=np.int64))
        lo = start + meta["offset"]
        if lo + count * dt.itemsize > len(raw):
            raise DataIOError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=lo).reshape(meta["shape"]).copy()
    return ModelConfig.from_dict(manifest["config"]), manifest["dtype"], fp, arrays


def load_checkpoint(store: ParamStore, path) -> ParamStore:
    """Load arrays into ``store``; nothing is written unless everything matches."""
    _, dtype, fp, arrays = read_checkpoint(path)
    if fp != store.fingerprint:
        raise FingerprintError("checkpoint was saved from a different model configuration")
    current = store.arrays()
    for name, a in arrays.items():
        if name in current and a.dtype != current[name].dtype:
            raise ConfigError(f"{name}: checkpoint dtype {a.dtype} vs model {current[name].dtype}")
    store.restore(arrays)
    return store
