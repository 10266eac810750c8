"""Command-line entry point: ``gunet <command> [options]``.

Exit codes: 0 ok, 1 usage, 2 file/IO, 3 configuration, 4 numeric (NaN/inf),
5 internal error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataIOError, GUNetError, NumericError, UsageError

log = logging.getLogger("gunet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record of a command run, rewritten atomically on every update."""

    def __init__(self, path, command: str, seed: int, config: dict):
        self.path = Path(path) if path else None
        self.data = {"command": command, "version": __version__, "seed": seed,
                     "config": config, "started": _now(), "finished": None,
                     "outputs": {}, "results": {}}
        self.write()

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, default=str) + "\n")
        os.replace(tmp, self.path)

    def finish(self, outputs: dict | None = None, results: dict | None = None):
        self.data["outputs"].update({k: str(v) for k, v in (outputs or {}).items()})
        self.data["results"].update(results or {})
        self.data["finished"] = _now()
        self.write()


# --------------------------------------------------------------------------
# shared option groups
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--manifest", metavar="PATH", help="write a JSON run manifest to PATH")


def _add_model(p: argparse.ArgumentParser):
    p.add_argument("--preset", help="model preset: T, S, B or D (default T)")
    p.add_argument("--config", metavar="PATH", help="config file with [model]/[train]/[data] sections")
    p.add_argument("--ablate", action="append", default=[], metavar="KEY=VALUE",
                   help="override a model field, e.g. fusion=sum, k=7, norm=layer, "
                        "gate=tanh, nonlin=relu_sum, attention=se, stages=5, blocks=4 (repeatable)")


def _run_config(args, train_overrides=None, data_overrides=None):
    from .config import build_run_config, parse_ablations

    preset = args.preset
    if preset is None and args.config is None:
        preset = "T"
    return build_run_config(args.config, preset, parse_ablations(args.ablate),
                            train_overrides, data_overrides)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_describe(args) -> int:
    from .cost import count_params

    run = _run_config(args)
    cfg = run.model
    stages = [{"stage": n, "width": w, "blocks": b} for n, w, b in cfg.stages()]
    info = {"preset": run.preset, "stages": stages, "params": count_params(cfg),
            "knobs": cfg.to_dict()}
    if args.json:
        print(json.dumps(info, indent=2))
    else:
        print(f"{'stage':<8}{'width':>7}{'blocks':>8}")
        for s in stages:
            print(f"{s['stage']:<8}{s['width']:>7}{s['blocks']:>8}")
        print(f"widths: {','.join(str(s['width']) for s in stages)}")
        print(f"params: {info['params'] / 1e6:.3f} M ({info['params']})")
        for k, v in cfg.to_dict().items():
            print(f"  {k} = {v}")
    RunManifest(args.manifest, "describe", args.seed, run.to_dict()).finish(results=info)
    return 0


def cmd_count(args) -> int:
    from .cost import cost_report, emit_cost_csv
    from .plotting import plot_cost

    run = _run_config(args)
    rep = cost_report(run.model, tuple(args.res))
    man = RunManifest(args.manifest, "count", args.seed, run.to_dict())
    print(f"resolution: {args.res[0]}x{args.res[1]}")
    print(f"params: {rep.total_params / 1e6:.3f} M")
    print(f"MACs: {rep.total_macs / 1e9:.3f} G")
    outputs = {}
    if args.csv:
        outputs["csv"] = emit_cost_csv(rep, args.csv)
        outputs["plot"] = plot_cost(rep, Path(args.csv).with_suffix(".png"),
                                    title=f"{run.preset or 'custom'} @ {args.res[0]}x{args.res[1]}")
    man.finish(outputs, {"params": rep.total_params, "macs": rep.total_macs})
    return 0


def cmd_synth(args) -> int:
    from .haze import generate_dataset, save_dataset

    if args.n < 1 or args.size < 1:
        raise UsageError("--n and --size must be positive")
    out = Path(args.out)
    config = {"n": args.n, "size": args.size, "seed": args.seed, "depth_kind": args.depth_kind}
    man = RunManifest(args.manifest or out / "manifest.json", "synth", args.seed, config)
    pairs = generate_dataset(args.n, args.size, args.seed, args.depth_kind)
    save_dataset(pairs, out)
    print(f"wrote {len(pairs)} pairs to {out}")
    man.finish({"dataset": out})
    return 0


def _load_data(args, run):
    from .haze import generate_dataset, load_dataset

    d = run.data
    if args.data:
        pairs = load_dataset(args.data)
        if args.val_data:
            return pairs, load_dataset(args.val_data)
        k = max(1, len(pairs) // 8)
        if len(pairs) <= k:
            raise DataIOError("need at least two pairs to hold out a validation split")
        return pairs[:-k], pairs[-k:]
    train = generate_dataset(d.n, d.size, d.seed, d.depth_kind)
    val = load_dataset(args.val_data) if args.val_data else \
        generate_dataset(d.val_n, d.size, d.val_seed, d.depth_kind)
    return train, val


def cmd_train(args) -> int:
    from .arch import build_gunet
    from .config import write_config
    from .plotting import plot_training
    from .train import save_checkpoint, train_loop

    overrides = {"seed": args.seed}
    for key in ("epochs", "crop", "batch_size", "samples_per_epoch", "precision", "lr_init",
                "warmup_epochs", "frozen_bn_epochs"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.ghost_norm_size is not None:
        g = args.ghost_norm_size
        overrides["ghost_norm_size"] = g if g == "full" else int(g)
    run = _run_config(args, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(args.manifest or out / "manifest.json", "train", args.seed, run.to_dict())
    write_config(run, out / "config.ini")
    train, val = _load_data(args, run)
    net, store = build_gunet(run.model, seed=args.seed, dtype=run.train.precision)
    metrics, best = out / "metrics.csv", out / "best.gunt"
    store, rows = train_loop(net, store, train, run.train, val=val, metrics_path=metrics,
                             checkpoint_path=best)
    final = save_checkpoint(store, out / "final.gunt")
    outputs = {"config": out / "config.ini", "final": final}
    results = {}
    if rows:
        outputs.update(metrics=metrics, best=best,
                       plot=plot_training(rows, out / "metrics.png", title=f"{run.preset or 'custom'}"))
        results = {k: rows[-1][k] for k in ("train_l1", "val_psnr", "val_ssim")}
        print(f"final: train_l1 {results['train_l1']:.5f}  val_psnr {results['val_psnr']:.3f} dB  "
              f"val_ssim {results['val_ssim']:.4f}")
    man.finish(outputs, results)
    return 0


def cmd_dehaze(args) -> int:
    from .arch import build_gunet, forward_dehaze
    from .haze import load_image, save_image
    from .tensor import no_grad
    from .train import load_checkpoint, read_checkpoint

    cfg, dtype, _, _ = read_checkpoint(args.checkpoint)
    net, store = build_gunet(cfg, seed=args.seed, dtype=dtype)
    load_checkpoint(store, args.checkpoint)
    net.set_norm_mode("eval")
    man = RunManifest(args.manifest, "dehaze", args.seed, {"model": cfg.to_dict(), "dtype": dtype})
    hazy = load_image(args.input)
    with no_grad():
        out = forward_dehaze(net, hazy.astype(store.dtype)).data[0].astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("network produced non-finite pixels")
    outputs = {"output": save_image(out, args.output)}
    if args.compare:
        side = np.concatenate([hazy, np.clip(out, 0, 1)], axis=2)
        outputs["compare"] = save_image(side, args.compare)
    print(f"wrote {args.output}")
    man.finish(outputs)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SCOPES

    scopes = list(SCOPES) if args.scope == "all" else [args.scope]
    man = RunManifest(args.manifest, "gradcheck", args.seed, {"scope": args.scope})
    results = []
    for s in scopes:
        results += SCOPES[s](seed=args.seed)
    failed = [r for r in results if not r.ok]
    for r in (results if args.verbose else failed):
        print(r.line())
    worst = max((r.rel_err for r in results), default=0.0)
    print(f"{len(results) - len(failed)}/{len(results)} gradients passed; max rel_err {worst:.3e}")
    man.finish(results={"checked": len(results), "failed": [r.name for r in failed]})
    return 0 if not failed else NumericError.exit_code


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gunet", description="gUNet dehazing toolkit: model costs, synthetic "
                                          "haze, training and inference on the CPU.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("describe", help="print stage widths, blocks and parameter count")
    _add_model(d)
    d.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    _add_common(d)
    d.set_defaults(func=cmd_describe)

    c = sub.add_parser("count", help="analytic parameter and MAC counts")
    _add_model(c)
    c.add_argument("--res", type=int, nargs=2, default=[256, 256], metavar=("H", "W"),
                   help="input resolution (default 256 256)")
    c.add_argument("--csv", metavar="PATH", help="write per-layer CSV (and a bar chart .png beside it)")
    _add_common(c)
    c.set_defaults(func=cmd_count)

    s = sub.add_parser("synth", help="generate a synthetic hazy/clean dataset")
    s.add_argument("--n", type=int, default=200, help="number of pairs (default 200)")
    s.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    s.add_argument("--depth-kind", default="mixed", choices=["ramp", "radial", "perlin", "mixed"],
                   help="depth map family (default mixed)")
    s.add_argument("--out", required=True, help="output directory")
    _add_common(s)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; writes metrics.csv/png and checkpoints")
    _add_model(t)
    t.add_argument("--data", help="dataset directory from `synth` (default: generate from [data])")
    t.add_argument("--val-data", help="validation dataset directory")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--samples-per-epoch", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--lr-init", type=float)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--frozen-bn-epochs", type=int)
    t.add_argument("--ghost-norm-size", help="normalization group size or 'full'")
    t.add_argument("--precision", choices=["single", "double"])
    _add_common(t)
    t.set_defaults(func=cmd_train)

    h = sub.add_parser("dehaze", help="dehaze one image with a checkpoint")
    h.add_argument("--checkpoint", required=True, help="GUNT checkpoint file")
    h.add_argument("--input", required=True, help="hazy image (PNG or PPM)")
    h.add_argument("--output", required=True, help="output PNG path")
    h.add_argument("--compare", metavar="PATH", help="also write a side-by-side hazy|dehazed PNG")
    _add_common(h)
    h.set_defaults(func=cmd_dehaze)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=["op", "block", "model", "all"], default="op",
                   help="what to check (default op)")
    _add_common(g)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GUNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DataIOError.exit_code
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return NumericError.exit_code
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return GUNetError.exit_code


if __name__ == "__main__":
    sys.exit(main())
