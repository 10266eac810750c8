"""Analytic parameter and multiply-accumulate counts for a ModelConfig.

Counting conventions:

* conv: ``out_elements * (in_ch / groups) * k * k`` MACs.  The bias
  initializes the accumulator and costs nothing extra; it is a parameter.
* eval-mode batch norm: one multiply-add per element.
* layer/instance norm: mean and variance accumulation plus the affine
  normalize, three per element; per statistic group one division and one
  square root (charged as two multiplies).
* elementwise multiply or add between feature maps: one per element.
* global average pooling: one add per element; softmax: three per logit.
* activations, pixel (un)shuffle, padding and cropping: free.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .arch import (SE_REDUCTION, SK_REDUCTION, ModelConfig, eca_kernel_size,
                   reduced_width)


@dataclass
class CostRow:
    layer: str
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    resolution: tuple[int, int] = (256, 256)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def add(self, layer: str, params: int, macs: int):
        self.rows.append(CostRow(layer, int(params), int(macs)))

    def by_prefix(self) -> dict[str, tuple[int, int]]:
        """Totals grouped by the first dotted component of each layer name."""
        out: dict[str, list[int]] = {}
        for r in self.rows:
            key = r.layer.split(".")[0]
            acc = out.setdefault(key, [0, 0])
            acc[0] += r.params
            acc[1] += r.macs
        return {k: (p, m) for k, (p, m) in out.items()}


def conv_cost(cin: int, cout: int, k: int, hw: int, groups: int = 1, bias: bool = True):
    params = cout * (cin // groups) * k * k + (cout if bias else 0)
    return params, hw * cout * (cin // groups) * k * k


def _norm_cost(kind: str, C: int, hw: int):
    if kind == "batch":
        return 2 * C, C * hw
    groups = 1 if kind == "layer" else C
    return 2 * C, 3 * C * hw + 3 * groups


def _block(rep: CostReport, name: str, C: int, hw: int, cfg: ModelConfig):
    k = cfg.dw_kernel
    rep.add(f"{name}.norm", *_norm_cost(cfg.norm_kind, C, hw))
    rep.add(f"{name}.pw1", *conv_cost(C, C, 1, hw))
    rep.add(f"{name}.pw2", *conv_cost(C, C, 1, hw))
    rep.add(f"{name}.dw", *conv_cost(C, C, k, hw, groups=C))
    # gate product (or branch sum for the activation ablations)
    rep.add(f"{name}.mix", 0, C * hw)
    rep.add(f"{name}.pw3", *conv_cost(C, C, 1, hw))
    if cfg.extra_attention == "se":
        d = reduced_width(C, SE_REDUCTION)
        p1, m1 = conv_cost(C, d, 1, 1)
        p2, m2 = conv_cost(d, C, 1, 1)
        rep.add(f"{name}.attn", p1 + p2, m1 + m2 + 2 * C * hw)
    elif cfg.extra_attention == "eca":
        ke = eca_kernel_size(C)
        rep.add(f"{name}.attn", ke, ke * C + 2 * C * hw)
    rep.add(f"{name}.residual", 0, C * hw)


def _fusion(rep: CostReport, name: str, C: int, hw: int, cfg: ModelConfig):
    if cfg.fusion_kind == "concat":
        rep.add(f"{name}.proj", *conv_cost(2 * C, C, 1, hw))
        return
    rep.add(f"{name}.proj", *conv_cost(C, C, 1, hw))
    if cfg.fusion_kind == "sum":
        rep.add(f"{name}.sum", 0, C * hw)
        return
    d = reduced_width(C, SK_REDUCTION)
    p1, m1 = conv_cost(C, d, 1, 1)
    p2, m2 = conv_cost(d, 2 * C, 1, 1)
    # sum + GAP over (skip_hat + main), then a1*skip_hat + a2*main
    rep.add(f"{name}.pool", 0, 2 * C * hw)
    rep.add(f"{name}.mlp", p1 + p2, m1 + m2 + 3 * 2 * C)
    rep.add(f"{name}.mix", 0, 2 * C * hw)


def cost_report(config: ModelConfig, resolution=(256, 256)) -> CostReport:
    """Per-layer costs for one image of ``resolution`` (padded up to a
    multiple of 2**levels as the network would)."""
    H, W = resolution
    m = 2 ** config.levels
    H, W = -(-H // m) * m, -(-W // m) * m
    rep = CostReport(resolution=tuple(resolution))
    L = config.levels
    width = [config.level_width(i) for i in range(L + 1)]
    blocks = {name: nb for name, _, nb in config.stages()}
    hw = [(H >> i) * (W >> i) for i in range(L + 1)]
    rep.add("input", 0, 3 * hw[0])
    rep.add("stem", *conv_cost(3, width[0], 3, hw[0]))
    for i in range(L):
        for j in range(blocks[f"enc{i}"]):
            _block(rep, f"enc{i}.block{j}", width[i], hw[i], config)
        rep.add(f"down{i}.proj", *conv_cost(4 * width[i], width[i + 1], 1, hw[i + 1]))
    for j in range(blocks["mid"]):
        _block(rep, f"mid.block{j}", width[L], hw[L], config)
    for i in reversed(range(L)):
        rep.add(f"up{i}.proj", *conv_cost(width[i + 1], 4 * width[i], 1, hw[i + 1]))
        _fusion(rep, f"fuse{i}", width[i], hw[i], config)
        for j in range(blocks[f"dec{i}"]):
            _block(rep, f"dec{i}.block{j}", width[i], hw[i], config)
    rep.add("head", *conv_cost(width[0], 3, 3, hw[0]))
    # residual scaling and global residual add, at the unpadded size
    rep.add("output", 0, 2 * 3 * resolution[0] * resolution[1])
    return rep


def count_params(config: ModelConfig) -> int:
    return cost_report(config, (2 ** config.levels,) * 2).total_params


def count_macs(config: ModelConfig, resolution=(256, 256)) -> int:
    return cost_report(config, resolution).total_macs


def cost_csv(report: CostReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "params", "macs"])
    for r in report.rows:
        w.writerow([r.layer, r.params, r.macs])
    w.writerow(["total", report.total_params, report.total_macs])
    return buf.getvalue()


def emit_cost_csv(report: CostReport, path) -> Path:
    path = Path(path)
    path.write_text(cost_csv(report))
    return path
