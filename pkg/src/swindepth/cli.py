"""Command-line entry point: ``swindepth {synth,train,infer,eval,report}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data or checkpoint error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .config import ConfigError, RunConfig
from .loss import NumericError
from .metrics import MetricsError, compute_metrics, format_table, image_metrics, valid_mask, write_metrics
from .synthdata import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = {"no_ppm": {"ppm": False}, "no_ta": {"topdown_add": False}, "no_dc": {"dense_concat": False}}

# config keys each command accepts; None means all of them
COMMAND_GROUPS = {
    "synth": ("run", "data"),
    "train": None,
    "infer": ("run",),
    "eval": ("run", "data", "eval"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_options(parser: argparse.ArgumentParser, groups: Optional[Sequence[str]]) -> None:
    """One option per RunConfig key in ``groups``; absent options stay out of the namespace."""
    parser.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default=argparse.SUPPRESS,
                        help="named set of defaults applied before --config")
    parser.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="'key = value' file")
    current = None
    section = parser
    for f in cfgmod.key_fields():
        group = f.metadata["group"]
        if groups is not None and group not in groups:
            continue
        if group != current:
            section = parser.add_argument_group(f"{group} keys")
            current = group
        default = f.default
        help_text = f"{f.metadata['help']} (default {cfgmod.format_value(default)})"
        if isinstance(default, bool):
            section.add_argument(_flag(f.name), dest=f"key_{f.name}", action=argparse.BooleanOptionalAction,
                                 default=argparse.SUPPRESS, help=help_text)
        else:
            section.add_argument(_flag(f.name), dest=f"key_{f.name}", metavar=type(default).__name__.upper(),
                                 default=argparse.SUPPRESS, help=help_text)


def config_from_args(args: argparse.Namespace, extra: Optional[dict] = None) -> RunConfig:
    overrides = dict(extra or {})
    overrides.update({k[4:]: v for k, v in vars(args).items() if k.startswith("key_")})
    return cfgmod.resolve(getattr(args, "preset", None), getattr(args, "config", None), overrides)


def echo_config(cfg: RunConfig, out: Path, extra: Sequence[str] = ()) -> None:
    out.mkdir(parents=True, exist_ok=True)
    header = "".join(f"# {line}\n" for line in extra)
    (out / "run_config.txt").write_text(header + cfgmod.dump(cfg))


@contextlib.contextmanager
def thread_limit(cfg: RunConfig):
    env = os.environ.get("SWINDEPTH_THREADS", "").strip()
    n = int(env) if env else cfg.threads
    if n > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n):
            yield
    else:
        yield


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthdata import synthesize

    cfg = config_from_args(args)
    out = Path(args.out)
    with thread_limit(cfg):
        dirs = synthesize(out, seed=cfg.seed, frames=cfg.frames, height=cfg.height, width=cfg.width,
                          scenes=cfg.scenes, step=cfg.synth_step, n_rects=cfg.rects,
                          depth_range=(cfg.near, cfg.far))
    echo_config(cfg, out)
    _say(f"wrote {len(dirs)} scene(s) of {cfg.frames} frames to {out}")
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _load_sequences(data: Path):
    from .synthdata import read_dataset

    scenes = read_dataset(data)
    return list(scenes), [scenes[k] for k in scenes]


def evaluate_holdout(models, cfg: RunConfig, names, sequences, out: Path, label: str = "model"):
    """Metrics, per-image table and figures on the held-out tail of every scene."""
    from .trainer import heldout_frames, predict_depth

    picks = heldout_frames(sequences, cfg.holdout)
    if not picks:
        raise DataError("holdout is 0: nothing to evaluate")
    images = np.stack([sequences[s].frames[t] for s, t in picks])
    gts = [sequences[s].depth[t] for s, t in picks]
    preds = predict_depth(models, images, cfg)
    tags = [f"{names[s]}/{t:06d}" for s, t in picks]
    return _write_eval(list(preds), gts, tags, cfg, out, label, images)


def _write_eval(preds, gts, tags, cfg: RunConfig, out: Path, label: str, images=None):
    from . import report

    out.mkdir(parents=True, exist_ok=True)
    rows = [image_metrics(p, g, cfg.cap, cfg.cap_min, cfg.median_scale, valid_mask(g, cfg.cap))
            for p, g in zip(preds, gts)]
    rep = compute_metrics(preds, gts, cfg.cap, cfg.cap_min, cfg.median_scale)
    notes = [f"cap_min={cfg.cap_min:g}", "crop=none (dense synthetic ground truth)"]
    table = format_table(rep, label, notes)
    (out / "report.txt").write_text(table)
    write_metrics(rep, out / "metrics.txt")
    from .metrics import METRIC_KEYS

    with open(out / "per_image.tsv", "w") as f:
        f.write("image\t" + "\t".join(METRIC_KEYS) + "\n")
        for tag, row in zip(tags, rows):
            f.write(tag + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    report.per_image_bars(tags, [r[0] for r in rows], out / "per_image_abs_rel.png")
    if images is not None:
        k = np.linspace(0, len(preds) - 1, min(4, len(preds))).round().astype(int)
        scaled = [preds[i] * (np.median(gts[i]) / np.median(preds[i])) if cfg.median_scale else preds[i] for i in k]
        report.depth_panels([images[i] for i in k], scaled, out / "depth_preview.png",
                            [gts[i] for i in k], [tags[i] for i in k])
    _say(table.rstrip())
    return rep


def cmd_train(args) -> int:
    from . import report
    from .trainer import fit

    extra = dict(ABLATIONS[args.ablate]) if args.ablate else {}
    cfg = config_from_args(args, extra)
    out = Path(args.out)
    names, sequences = _load_sequences(Path(args.data))
    resume = None
    if args.resume:
        resume = out / "checkpoints" / "last.swdp" if args.resume == "last" else Path(args.resume)
    echo_config(cfg, out, [f"ablate={args.ablate or 'none'}", f"data={args.data}"])
    with thread_limit(cfg):
        result = fit(cfg, sequences, out, resume=resume, log=None if args.quiet else _say)
        report.loss_curve(out / "loss_log.txt", out / "loss_curve.png")
        counts = result.models.num_parameters()
        with open(out / "parameters.tsv", "w") as f:
            f.write("module\tparameters\n")
            for k, v in counts.items():
                f.write(f"{k}\t{v}\n")
            f.write(f"total\t{sum(counts.values())}\n")
        _say(f"trained {result.state.step} steps in {result.seconds:.1f} s; final loss {result.losses[-1]:.6f}")
        if cfg.holdout > 0 and not args.no_eval:
            evaluate_holdout(result.models, cfg, names, sequences, out / "holdout", "holdout")
    return EXIT_OK


# -- infer --------------------------------------------------------------------

def _collect_inputs(path: Path) -> list[tuple[Path, Path]]:
    """(input image, output stem relative to the output dir)."""
    if path.is_file():
        return [(path, Path(_out_stem(path.name)))]
    if not path.is_dir():
        raise DataError(f"input {path} does not exist")
    found = sorted(p for p in path.rglob("*.ppm") if p.is_file())
    if not found:
        raise DataError(f"no .ppm images under {path}")
    return [(p, p.parent.relative_to(path) / _out_stem(p.name)) for p in found]


def _out_stem(name: str) -> str:
    stem = Path(name).stem
    return "depth_" + stem[len("frame_"):] if stem.startswith("frame_") else stem


def cmd_infer(args) -> int:
    from .numerics import Tensor, default_dtype, no_grad, ops
    from .synthdata import read_ppm, write_pfm, write_ppm
    from .trainer import load_models, predict_depth, read_config

    records = ckpt.load(args.checkpoint)
    saved = read_config(records)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_")}
    cfg = cfgmod.resolve(None, None, {**saved, **overrides})
    models = load_models(records, cfg)
    out = Path(args.out)
    echo_config(cfg, out, [f"checkpoint={args.checkpoint}"])
    with thread_limit(cfg):
        for src, stem in _collect_inputs(Path(args.input)):
            img = read_ppm(src)
            h, w = img.shape[1:]
            x = img
            if (h, w) != (cfg.height, cfg.width):
                with no_grad(), default_dtype(np.float64):
                    x = ops.bilinear_resize(Tensor(img[None].astype(np.float64)), cfg.height, cfg.width,
                                            edge="clamp").data[0]
            depth = predict_depth(models, x[None], cfg)[0]
            if depth.shape != (h, w):
                with no_grad(), default_dtype(np.float64):
                    inv = ops.bilinear_resize(Tensor(1.0 / depth[None, None]), h, w, edge="clamp").data[0, 0]
                depth = 1.0 / inv
            target = out / stem
            target.parent.mkdir(parents=True, exist_ok=True)
            write_pfm(target.with_suffix(".pfm"), depth.astype(np.float32))
            inv = 1.0 / depth
            lo, hi = inv.min(), inv.max()
            preview = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
            write_ppm(target.with_suffix(".ppm"), np.repeat(preview[None], 3, axis=0))
            _say(f"{src} -> {target.with_suffix('.pfm')}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .synthdata import read_manifest, read_pfm, read_ppm

    cfg = config_from_args(args)
    pred_root, gt_root = Path(args.pred), Path(args.gt)
    out = Path(args.out)
    preds, gts, tags, images = [], [], [], []
    for sid, count in read_manifest(gt_root):
        first = count - cfg.holdout if args.split == "holdout" else 0
        for i in range(max(0, first), count):
            gt_path = gt_root / f"scene_{sid}" / f"depth_{i:06d}.pfm"
            pred_path = pred_root / f"scene_{sid}" / f"depth_{i:06d}.pfm"
            for p in (gt_path, pred_path):
                if not p.exists():
                    raise DataError(f"missing file {p}")
            gts.append(read_pfm(gt_path).astype(np.float64))
            preds.append(read_pfm(pred_path).astype(np.float64))
            tags.append(f"{sid}/{i:06d}")
            frame = gt_root / f"scene_{sid}" / f"frame_{i:06d}.ppm"
            images.append(read_ppm(frame) if frame.exists() else None)
    if not preds:
        raise DataError("no frames selected for evaluation")
    echo_config(cfg, out, [f"pred={pred_root}", f"gt={gt_root}", f"split={args.split}"])
    have_images = all(im is not None for im in images)
    _write_eval(preds, gts, tags, cfg, out, args.label, images if have_images else None)
    return EXIT_OK


# -- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    from . import report

    run = Path(args.run)
    log = run / "loss_log.txt"
    if not log.exists():
        raise DataError(f"missing file {log}")
    steps, lr, loss = report.read_loss_log(log)
    if not len(loss):
        raise DataError(f"{log} is empty")
    png = report.loss_curve(log, run / "loss_curve.png", args.window)
    smooth = report.ema(loss, args.window)
    head = float(loss[:min(50, len(loss))].mean())
    tail = float(loss[max(0, len(loss) - 51):].mean())
    _say(f"steps={len(loss)} first50_mean={head!r} last51_mean={tail!r} ratio={tail / head!r}")
    _say(f"ema_start={float(smooth[0])!r} ema_end={float(smooth[-1])!r}")
    _say(f"wrote {png}")
    return EXIT_OK


# -- entry --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swindepth", description="Self-supervised monocular depth with a shifted-window "
                                                   "transformer encoder and a dense cascade decoder.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    add_config_options(p, COMMAND_GROUPS["synth"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train depth and pose networks")
    p.add_argument("--data", required=True, help="dataset directory (manifest.txt + scene_*/)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from, or 'last' for OUT/checkpoints/last.swdp")
    p.add_argument("--ablate", choices=sorted(ABLATIONS), help="decoder ablation variant")
    p.add_argument("--no-eval", action="store_true", help="skip the held-out evaluation after training")
    p.add_argument("--quiet", action="store_true", help="no progress lines")
    add_config_options(p, COMMAND_GROUPS["train"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict depth for images")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--input", required=True, help="a .ppm image or a directory searched recursively")
    p.add_argument("--out", required=True, help="output directory (input tree mirrored)")
    add_config_options(p, COMMAND_GROUPS["infer"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted depth against ground truth")
    p.add_argument("--pred", required=True, help="directory laid out like the dataset (scene_*/depth_*.pfm)")
    p.add_argument("--gt", required=True, help="dataset directory with manifest.txt")
    p.add_argument("--out", required=True, help="directory for report.txt, metrics.txt and figures")
    p.add_argument("--split", choices=("all", "holdout"), default="all",
                   help="evaluate every frame or only the trailing 'holdout' frames of each scene")
    p.add_argument("--label", default="model", help="row label in the report table")
    add_config_options(p, COMMAND_GROUPS["eval"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render the loss curve of a run directory")
    p.add_argument("--run", required=True, help="run directory containing loss_log.txt")
    p.add_argument("--window", type=int, default=50, help="EMA window")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"swindepth {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MetricsError, ckpt.CheckpointError) as exc:
        print(f"swindepth {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        payload = getattr(exc, "payload", None)
        print(f"swindepth {args.command}: numeric failure: {exc}" + (f" {payload}" if payload else ""),
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
