"""Synthetic haze from the atmospheric scattering model, its analytic
inversion, full-reference metrics, and dataset/image I/O.

Images are float arrays shaped (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import ConfigError, DataIOError, ShapeError

DEPTH_MAX = 3.0
T_FLOOR = 0.05
BETA_RANGE = (0.5, 2.0)
A_RANGE = (0.7, 1.0)
DEPTH_KINDS = ("ramp", "radial", "perlin")
DEPTH_ALIASES = {"perlin-like": "perlin"}


@dataclass
class HazeParams:
    A: np.ndarray      # per-channel atmospheric light, shape (3,)
    beta: float
    depth: np.ndarray  # (H, W), >= 0

    def transmission(self) -> np.ndarray:
        return np.exp(-self.beta * self.depth)


@dataclass
class ImagePair:
    clean: np.ndarray
    hazy: np.ndarray
    params: HazeParams


def _a(params: HazeParams) -> np.ndarray:
    return np.asarray(params.A, dtype=np.float64).reshape(-1, 1, 1)


def synthesize_haze(clean: np.ndarray, params: HazeParams, clamp: bool = True) -> np.ndarray:
    """I = J t + A (1 - t), per pixel and channel."""
    t = params.transmission()[None]
    hazy = clean * t + _a(params) * (1 - t)
    return np.clip(hazy, 0, 1) if clamp else hazy


def invert_haze(hazy: np.ndarray, params: HazeParams, t_floor: float = T_FLOOR) -> np.ndarray:
    """J = (I - A (1 - t)) / max(t, t_floor), clamped to [0, 1]."""
    if not t_floor > 0:
        raise ConfigError(f"t_floor must be positive, got {t_floor}")
    t = params.transmission()[None]
    A = _a(params)
    return np.clip((hazy - A * (1 - t)) / np.maximum(t, t_floor), 0, 1)


# --------------------------------------------------------------------------
# procedural scenes
# --------------------------------------------------------------------------

def _color(rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Saturated colors: one channel near zero, like most natural patches."""
    c = rng.uniform(0.1, 1.0, (n, 3))
    c[np.arange(n), rng.integers(0, 3, n)] = rng.uniform(0.0, 0.08, n)
    return c


def _clean_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = _color(rng, 2)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * xx + np.sin(ang) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 9)):
        color = _color(rng)[0][:, None, None]
        if rng.random() < 0.5:
            x0, y0 = rng.integers(0, size, 2)
            w, h = rng.integers(size // 8 + 1, size // 2 + 2, 2)
            mask = (xx * (size - 1) >= x0) & (xx * (size - 1) < x0 + w) & \
                   (yy * (size - 1) >= y0) & (yy * (size - 1) < y0 + h)
        else:
            cx, cy = rng.uniform(0, 1, 2)
            r = rng.uniform(0.08, 0.3)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img = np.where(mask[None], color, img)
    return img


def depth_map(rng: np.random.Generator, size: int, kind: str) -> np.ndarray:
    """Smooth depth normalized to [0, DEPTH_MAX]."""
    kind = DEPTH_ALIASES.get(kind, kind)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    if kind == "ramp":
        ang = rng.uniform(0, 2 * np.pi)
        d = np.cos(ang) * xx + np.sin(ang) * yy
    elif kind == "radial":
        cx, cy = rng.uniform(0.2, 0.8, 2)
        d = -np.hypot(xx - cx, yy - cy)
    elif kind == "perlin":
        d = np.zeros((size, size))
        for octave, amp in ((4, 1.0), (8, 0.5), (16, 0.25)):
            grid = rng.standard_normal((octave + 1, octave + 1))
            d += amp * zoom(grid, size / (octave + 1), order=3)[:size, :size]
    else:
        raise ConfigError(f"depth kind must be one of {DEPTH_KINDS}, got {kind!r}")
    d = d - d.min()
    span = d.max()
    return d * (DEPTH_MAX / span) if span > 0 else d


def make_pair(seed: int, index: int, size: int, depth_kind: str = "perlin") -> ImagePair:
    rng = np.random.default_rng([seed, index])
    clean = _clean_image(rng, size)
    kind = depth_kind if depth_kind != "mixed" else DEPTH_KINDS[rng.integers(len(DEPTH_KINDS))]
    depth = depth_map(rng, size, kind)
    params = HazeParams(A=rng.uniform(*A_RANGE, 3), beta=float(rng.uniform(*BETA_RANGE)), depth=depth)
    return ImagePair(clean, synthesize_haze(clean, params), params)


def generate_dataset(n: int, size: int, seed: int, depth_kind: str = "mixed") -> list[ImagePair]:
    """Deterministic synthetic pairs; image ``i`` uses the RNG stream (seed, i).

    ``depth_kind`` is one of ``ramp``, ``radial``, ``perlin`` or ``mixed``
    (a per-image random choice).
    """
    depth_kind = DEPTH_ALIASES.get(depth_kind, depth_kind)
    if depth_kind not in DEPTH_KINDS + ("mixed",):
        raise ConfigError(f"depth kind must be one of {DEPTH_KINDS + ('mixed',)}, got {depth_kind!r}")
    return [make_pair(seed, i, size, depth_kind) for i in range(n)]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10 * np.log10(1.0 / mse), PSNR_CAP))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation over the last two axes, valid region only."""
    k = g.size
    H, W = img.shape[-2:]
    rows = sum(g[i] * img[..., i:H - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., j:W - k + 1 + j] for j in range(k))


def ssim(a: np.ndarray, b: np.ndarray, win: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per channel then averaged.

    Local statistics are computed only where the window fits inside the
    image.  Images are (C, H, W) or (H, W) with data range 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < win:
        raise ShapeError(f"ssim needs images at least {win}x{win}")
    g = _gauss_window(win, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / \
           ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    if smap.ndim == 2:
        return float(smap.mean())
    return float(np.mean(smap.reshape(smap.shape[0], -1).mean(axis=1)))


# --------------------------------------------------------------------------
# image and dataset files
# --------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8, clamping at export."""
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def _write_ppm(path: Path, rgb: np.ndarray):
    h, w = rgb.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataIOError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if pix.size != w * h * 3:
        raise DataIOError(f"{path}: truncated PPM data")
    return pix.reshape(h, w, 3)


def save_image(img: np.ndarray, path) -> Path:
    """Write a (3, H, W) [0, 1] image as 8-bit PNG (or PPM by extension)."""
    path = Path(path)
    rgb = to_uint8(img)
    if path.suffix.lower() in (".ppm", ".pnm"):
        _write_ppm(path, rgb)
    else:
        from PIL import Image
        Image.fromarray(rgb, "RGB").save(path, format="PNG")
    return path


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"image not found: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return from_uint8(_read_ppm(path))
    from PIL import Image
    try:
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except OSError as e:
        raise DataIOError(f"cannot read image {path}: {e}") from e


def save_dataset(pairs: list[ImagePair], out_dir) -> Path:
    """Write ``clean/NNNN.png``, ``hazy/NNNN.png`` and ``params.csv``."""
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "hazy").mkdir(parents=True, exist_ok=True)
    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "beta", "A_r", "A_g", "A_b"])
        for i, p in enumerate(pairs):
            save_image(p.clean, out / "clean" / f"{i:04d}.png")
            save_image(p.hazy, out / "hazy" / f"{i:04d}.png")
            w.writerow([i, repr(p.params.beta), *(repr(float(a)) for a in p.params.A)])
    return out


def load_dataset(data_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """(clean, hazy) arrays for every index listed in ``params.csv``."""
    d = Path(data_dir)
    index = d / "params.csv"
    if not index.is_file():
        raise DataIOError(f"no params.csv in {d}")
    with open(index) as fh:
        rows = list(csv.DictReader(fh))
    pairs = []
    for row in rows:
        name = f"{int(row['index']):04d}.png"
        pairs.append((load_image(d / "clean" / name), load_image(d / "hazy" / name)))
    return pairs
