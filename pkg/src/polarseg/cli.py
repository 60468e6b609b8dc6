"""Command-line entry point: synth, polar, train, segment, eval, screen."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import io
from .evaluation import EvalRecord, evaluate_case, roc_auc, summarize
from .model import MNetConfig, WeightsFormatError, build_mnet, load_weights
from .pipeline import PolarSetup, estimate_disc_center, segment, training_pairs
from .polar import PolarConfig, to_polar
from .postprocess import SegMasks
from .synth import SynthSpec, labeled_screening_set
from .trainer import OptState, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("polarseg")

CONFIG_FLAGS = ("seed", "size", "radius", "bins", "threshold")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _run_config(args, base: io.RunConfig | None = None) -> io.RunConfig:
    if args.config:
        cfg = io.load_config(args.config)
    else:
        cfg = base or io.RunConfig()
    overrides = {k: getattr(args, k, None) for k in CONFIG_FLAGS}
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            overrides[key[4:]] = value
    return cfg.updated(**overrides)


def _setup(cfg: io.RunConfig) -> PolarSetup:
    return PolarSetup(enabled=cfg.polar, size=cfg.resolved_bins() if cfg.polar else cfg.size,
                      radius=cfg.resolved_radius())


def _model_config(cfg: io.RunConfig) -> MNetConfig:
    return MNetConfig(depth=cfg.depth, base_channels=cfg.base_channels, input_size=_setup(cfg).size,
                      in_channels=3, class_weights=[cfg.disc_weight, 1.0 - cfg.disc_weight])


def _parse_center(text: str):
    if text == "auto":
        return "auto"
    try:
        u, v = (float(t) for t in text.split(","))
    except ValueError:
        raise CLIError(f"--center expects 'U,V' or 'auto', got {text!r}") from None
    return (u, v)


def _rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image[..., None], 3, axis=2) if image.ndim == 2 else image


def _load_samples(data_dir):
    rows = io.read_manifest(data_dir)
    out = []
    for row in rows:
        where = f"{row['_dir']}/{io.MANIFEST}:{row['_line']}"
        try:
            image = _rgb(io.read_png(io.resolve(row, "image")))
            masks = SegMasks(io.read_mask(io.resolve(row, "disc_mask")), io.read_mask(io.resolve(row, "cup_mask")))
            center = (float(row["u"]), float(row["v"]))
        except (OSError, ValueError, TypeError) as exc:
            raise CLIError(f"{where}: {exc}") from None
        out.append((row, image, masks, center))
    return out


def _load_graph(weights: str, cfg: io.RunConfig):
    path = Path(weights)
    try:
        if path.is_dir():
            graph, _, _, meta = load_checkpoint(path, build_mnet)
            extra = meta.get("extra", {})
            if "run" in extra:
                cfg = io.parse_config(extra["run"], str(path / "state.json")).updated(
                    threshold=cfg.threshold, seed=cfg.seed)
            return graph, cfg
        graph = build_mnet(_model_config(cfg))
        graph.load_state_dict(load_weights(path))
        return graph, cfg
    except WeightsFormatError as exc:
        raise CLIError(f"{path}: {exc}") from None
    except FileNotFoundError as exc:
        raise CLIError(f"weights not found: {exc.filename}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    spec = SynthSpec(size=cfg.size, seed=cfg.seed)
    samples, labels, frac = labeled_screening_set(spec, cfg.n, cfg.cutoff, cfg.margin)
    rows = []
    for i, s in enumerate(samples):
        name = f"synth_{i:04d}"
        io.write_png(out / "images" / f"{name}.png", s.image)
        io.write_png(out / "masks" / f"{name}_disc.png", s.masks.disc)
        io.write_png(out / "masks" / f"{name}_cup.png", s.masks.cup)
        rows.append({"name": name, "image": f"images/{name}.png", "disc_mask": f"masks/{name}_disc.png",
                     "cup_mask": f"masks/{name}_cup.png", "u": s.center[0], "v": s.center[1],
                     "cdr": s.cdr, "label": int(s.label)})
    io.write_manifest(out, rows)
    cfg.write(out)
    print(f"wrote {len(rows)} samples to {out} ({frac:.1%} positive at CDR cutoff {cfg.cutoff})")
    return 0


def cmd_polar(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    image = io.read_png(args.image)
    center = _parse_center(args.center) if args.center else None
    if center is None:
        raise CLIError("no disc center: pass --center U,V or --center auto (brightness heuristic)")
    if center == "auto":
        center = estimate_disc_center(image)
    radius = cfg.radius or min(image.shape[:2]) / 2.0
    bins = cfg.bins or int(round(radius))
    pcfg = PolarConfig(center=center, radius=radius, angular_bins=bins, radial_bins=bins)
    polar = to_polar(image, pcfg)
    stem = Path(args.image).stem
    io.write_png(out / f"{stem}_polar.png", polar)
    (out / f"{stem}_polar.json").write_text(pcfg.to_json() + "\n")
    cfg.write(out)
    print(f"wrote {out / (stem + '_polar.png')} ({polar.shape[0]}x{polar.shape[1]})")
    return 0


def cmd_train(args) -> int:
    base = None
    if args.resume:
        # a resumed run keeps the checkpoint's settings unless flags say otherwise
        meta_path = Path(args.resume) / "state.json"
        run = json.loads(meta_path.read_text()).get("extra", {}).get("run")
        base = io.parse_config(run, str(meta_path)) if run else None
    cfg = _run_config(args, base)
    out = Path(args.out)
    data = _load_samples(args.data)
    if not data:
        raise CLIError(f"{args.data}: manifest lists no samples")
    setup = _setup(cfg)
    pairs = training_pairs([SimpleNamespace(image=img, masks=m, center=c) for _, img, m, c in data], setup)
    tcfg = TrainConfig(lr0=cfg.lr, momentum=cfg.momentum, iterations=cfg.epochs, max_steps=cfg.steps or None,
                       seed=cfg.seed, batch_size=cfg.batch_size, fused_weight=cfg.fused_weight)
    if args.resume:
        graph, state, _, _ = load_checkpoint(args.resume, build_mnet)
    else:
        graph = build_mnet(_model_config(cfg), seed=cfg.seed)
        state = OptState.zeros_like(graph.params)
    result = train(graph, pairs, tcfg, state=state)
    save_checkpoint(out, graph, result.state, tcfg, extra={"run": cfg.dump()})
    start = result.state.step - len(result.losses)
    io.write_csv(out / "loss.csv", ["step", "total"] + [f"side{m}" for m in range(graph.config.num_sides)],
                 [[start + i, r.total, *r.per_side] for i, r in enumerate(result.losses)])
    cfg.write(out)
    final = result.losses[-1].total if result.losses else float("nan")
    print(f"trained {result.state.step} steps, final loss {final:.4f}; checkpoint in {out}")
    return 0


def cmd_segment(args) -> int:
    cfg = _run_config(args)
    if not args.weights:
        raise CLIError("--weights is required (checkpoint directory or MNETW1 file)")
    graph, cfg = _load_graph(args.weights, cfg)
    setup = _setup(cfg)
    out = Path(args.out)
    jobs = []
    if args.manifest:
        for row in io.read_manifest(args.manifest):
            center = _parse_center(args.center) if args.center else None
            if center is None and row.get("u") and row.get("v"):
                center = (float(row["u"]), float(row["v"]))
            jobs.append((row["name"], io.resolve(row, "image"), center))
    for path in args.images:
        jobs.append((Path(path).stem, Path(path), _parse_center(args.center) if args.center else None))
    if not jobs:
        raise CLIError("nothing to segment: give image paths or --manifest")
    rows, table = [], []
    for name, path, center in jobs:
        if center is None:
            raise CLIError(f"{name}: no disc center; supply --center U,V, a --manifest with u,v columns, "
                           "or --center auto for the brightness heuristic")
        image = _rgb(io.read_png(path))
        if center == "auto":
            center = estimate_disc_center(image)
        seg = segment(graph, image, center, setup, cfg.threshold)
        geo = seg.geometry
        masks = geo.raw if cfg.raw_masks else geo.masks
        io.write_png(out / "masks" / f"{name}_disc.png", masks.disc)
        io.write_png(out / "masks" / f"{name}_cup.png", masks.cup)
        record = {
            "name": name, "center": list(center), "cdr": geo.cdr, "rdar": geo.rdar,
            "disc_ellipse": geo.disc.as_dict() if geo.disc else None,
            "cup_ellipse": geo.cup.as_dict() if geo.cup else None,
            "cup_missing": geo.cup_missing, "cup_outside_disc": geo.cup_outside_disc,
        }
        (out / "records").mkdir(parents=True, exist_ok=True)
        (out / "records" / f"{name}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        rows.append({"name": name, "image": os.path.relpath(path, out), "disc_mask": f"masks/{name}_disc.png",
                     "cup_mask": f"masks/{name}_cup.png", "u": center[0], "v": center[1], "cdr": geo.cdr})
        table.append([name, geo.cdr, geo.rdar, int(geo.cup_missing), int(geo.cup_outside_disc)])
        print(f"{name}: CDR {geo.cdr:.3f} RDAR {geo.rdar:.3f} ({seg.seconds:.2f} s)")
    io.write_manifest(out, rows)
    io.write_csv(out / "segment.csv", ["name", "CDR", "RDAR", "cup_missing", "cup_outside_disc"], table)
    cfg.write(out)
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    pred = {r["name"]: r for r in io.read_manifest(args.pred)}
    gt = io.read_manifest(args.gt)
    records = []
    for row in gt:
        name = row["name"]
        if name not in pred:
            raise CLIError(f"{row['_dir']}/{io.MANIFEST}:{row['_line']}: no prediction for {name!r} in {args.pred}")
        p = pred[name]
        cdr_s = float(p["cdr"]) if p.get("cdr") not in (None, "", "nan") else 0.0
        records.append(evaluate_case(
            name,
            io.read_mask(io.resolve(p, "disc_mask")), io.read_mask(io.resolve(p, "cup_mask")),
            io.read_mask(io.resolve(row, "disc_mask")), io.read_mask(io.resolve(row, "cup_mask")),
            cdr_s, float(row["cdr"])))
    mean = summarize(records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(out, EvalRecord.FIELDS, [r.row() for r in records] + [["mean"] + [mean[f] for f in EvalRecord.FIELDS[1:]]])
    cfg.write(out.parent)
    print(" ".join(f"{k}={v:.4f}" for k, v in mean.items() if k not in ("CDR_S", "CDR_G")))
    return 0


def cmd_screen(args) -> int:
    cfg = _run_config(args)
    with open(args.scores, newline="") as fh:
        scores = {row["name"]: row for row in csv.DictReader(fh) if row.get("name") != "mean"}
    names, s, y = [], [], []
    for row in io.read_manifest(args.gt):
        name = row["name"]
        if name not in scores:
            raise CLIError(f"{args.scores}: no score for {name!r}")
        if args.column not in scores[name]:
            raise CLIError(f"{args.scores}: no column {args.column!r}")
        label = row.get("label")
        lab = int(label) if label not in (None, "", "-1") else int(float(row["cdr"]) > cfg.cutoff)
        names.append(name)
        s.append(float(scores[name][args.column]))
        y.append(lab)
    try:
        roc = roc_auc(s, y)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(out, ["threshold", "fpr", "tpr"], zip(roc.thresholds, roc.fpr, roc.tpr))
    cfg.write(out.parent)
    print(f"AUC {roc.auc:.4f} over {len(s)} images ({sum(y)} positive)")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value run config; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--size", type=int, help="ROI side in pixels")
    common.add_argument("--radius", type=float, help="polar radius R in pixels (default size/2)")
    common.add_argument("--bins", type=int, help="polar bins per axis (default size)")
    common.add_argument("--threshold", type=float)
    common.add_argument("--out", required=True)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="polarseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fundus dataset")
    p.add_argument("--n", dest="cfg_n", type=int)
    p.add_argument("--cutoff", dest="cfg_cutoff", type=float)
    p.add_argument("--margin", dest="cfg_margin", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("polar", parents=[common], help="polar-transform one PNG")
    p.add_argument("image")
    p.add_argument("--center", help="'U,V' in pixels or 'auto'")
    p.set_defaults(func=cmd_polar)

    p = sub.add_parser("train", parents=[common], help="train M-Net on a synth-style manifest")
    p.add_argument("--data", required=True, help="directory with manifest.csv")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--epochs", dest="cfg_epochs", type=int)
    p.add_argument("--steps", dest="cfg_steps", type=int)
    p.add_argument("--lr", dest="cfg_lr", type=float)
    p.add_argument("--depth", dest="cfg_depth", type=int)
    p.add_argument("--base-channels", dest="cfg_base_channels", type=int)
    p.add_argument("--no-polar", dest="cfg_polar", action="store_const", const=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="segment images with trained weights")
    p.add_argument("images", nargs="*")
    p.add_argument("--weights", help="checkpoint directory or MNETW1 weights file")
    p.add_argument("--manifest", help="directory or manifest.csv listing images and centers")
    p.add_argument("--center", help="'U,V' in pixels or 'auto'")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", parents=[common], help="compare predicted and ground-truth masks")
    p.add_argument("--pred", required=True, help="directory with a prediction manifest")
    p.add_argument("--gt", required=True, help="directory with the ground-truth manifest")
    p.add_argument("--raw-masks", dest="cfg_raw_masks", action="store_const", const=True,
                   help="score thresholded masks instead of fitted-ellipse masks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("screen", parents=[common], help="ROC/AUC of a score column against labels")
    p.add_argument("--scores", required=True, help="CSV with a name column, e.g. eval output")
    p.add_argument("--column", default="CDR_S")
    p.add_argument("--gt", required=True, help="directory with the ground-truth manifest")
    p.add_argument("--cutoff", dest="cfg_cutoff", type=float)
    p.set_defaults(func=cmd_screen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("POLARSEG_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (CLIError, ValueError, OSError, KeyError) as exc:
        print(f"polarseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
