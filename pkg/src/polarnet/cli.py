"""Command-line entry point: ``polarnet <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

log = logging.getLogger("polarnet")

DEFAULT_ALPHAS = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _words(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
            k, v = (t.strip() for t in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def write_resolved(args, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config"}
    with open(out_dir / "config.txt", "w") as fh:
        for k in sorted(vars(args)):
            if k not in skip:
                fh.write(f"{k} = {getattr(args, k)}\n")


# -- model helpers -------------------------------------------------------------

def _model_config(args, **over):
    from .detector import DetectorConfig

    return DetectorConfig(stage=over.get("stage", args.stage), width=args.width, alpha=args.alpha,
                          use_polar=args.polar, padding=args.padding, nms_iou=args.nms_iou)


def _load_model(args):
    from .detector import DetectorModel

    model = DetectorModel.load(args.model)
    cfg = model.config
    cfg.alpha = args.alpha if args.alpha is not None else cfg.alpha
    cfg.nms_iou = args.nms_iou if args.nms_iou is not None else cfg.nms_iou
    return model


def _train_config(args, max_epochs=None):
    from .train import TrainConfig

    epochs = max_epochs or args.epochs
    kw = dict(lr=args.lr, gamma=args.gamma, batch_size=args.batch_size,
              polar_weight=args.polar_weight, seed=args.seed, max_train=args.max_train,
              max_val=args.max_val, max_epochs=epochs)
    if args.milestones:
        kw["milestones"] = tuple(_ints(args.milestones))
    else:
        kw["milestones"] = tuple(m for m in (round(epochs * 0.6), round(epochs * 0.85))
                                 if 0 < m < epochs)
    return TrainConfig(**kw)


def _test_samples(args, manifest=None):
    from .train import load_split

    manifest = manifest or args.ann
    sources = _words(args.sources) if args.sources else None
    samples = load_split(manifest, args.split, sources)
    if not samples:
        raise ValueError(f"no '{args.split}' tiles with sources {args.sources} in {manifest}")
    return samples


# -- subcommands ---------------------------------------------------------------

def cmd_gen(args, out: Path):
    from .synth import DEFAULT_COUNTS, build_dataset
    from .wsi import make_mosaic

    counts = dict(DEFAULT_COUNTS)
    for item in _words(args.counts or ""):
        name, val = item.split("=")
        key = tuple(name.split("-", 1))
        if key not in counts:
            known = ", ".join("-".join(k) for k in counts)
            raise ValueError(f"unknown split-source {name!r}; expected one of {known}")
        counts[key] = int(val)
    if args.tiles:
        manifest = build_dataset(out, counts, args.seed, args.difficulty, args.workers)
        print(f"wrote {manifest}")
    for k in range(args.mosaics):
        root = out / "mosaics" / f"slide_{k:02d}"
        make_mosaic(root, args.mosaic_size, args.mosaic_size, args.planted,
                    seed=args.seed * 1000 + k, difficulty=args.difficulty)
        print(f"wrote {root}")


def cmd_train(args, out: Path):
    from .detector import DetectorModel
    from .train import train

    model = DetectorModel(_model_config(args), seed=args.seed)
    history = train(model, args.manifest, _train_config(args), out)
    model.save(out / "model.tdk")
    best = max((h.val_ap50 for h in history if h.val_ap50 is not None), default=None)
    print(f"trained {len(history)} epochs; best val AP50 "
          f"{'n/a' if best is None else f'{best:.4f}'}; model -> {out / 'model.tdk'}")


def cmd_eval(args, out: Path):
    from .boxes import read_detections, write_detections
    from .metrics import ap_table, average_precision, plot_lines, pooled_topn, write_table
    from .synth import read_manifest
    from .train import predict_split

    if args.preds:
        by_image: dict = {}
        for slide, tx, ty, box in read_detections(args.preds):
            by_image.setdefault(slide, []).append(box.shifted(-tx, -ty) if tx or ty else box)
        entries = [e for e in read_manifest(args.ann)
                   if (args.split is None or e.split == args.split)
                   and (not args.sources or e.source in _words(args.sources))]
        unknown = set(by_image) - {e.path for e in entries}
        if unknown:
            raise ValueError(f"predictions refer to images not in the annotations: "
                             f"{sorted(unknown)[:3]}")
        images = [(by_image.get(e.path, []), e.boxes) for e in entries]
    else:
        if not args.model:
            raise ValueError("eval needs --preds or --model")
        model = _load_model(args)
        samples = _test_samples(args)
        images = predict_split(model, samples)
        root = Path(args.ann).parent
        write_detections(out / "preds.txt",
                         ((str(s.path.relative_to(root)), 0, 0, b)
                          for s, (preds, _) in zip(samples, images) for b in preds))
    curve = average_precision(images, args.iou)
    curve.to_csv(out / "pr.csv")
    table = ap_table(images)
    table[f"top{args.n}_accuracy"] = pooled_topn(images, args.n, args.iou)
    write_table(out / "metrics.csv", ["metric", "value"],
                [(k, "n/a" if v is None else float(v)) for k, v in table.items()])
    if len(curve.recall):
        plot_lines(out / "pr.svg", {f"IoU {args.iou:g}": (curve.recall, curve.precision)},
                   "recall", "precision", "Precision-recall")
    ap = curve.ap
    print(f"AP{int(round(args.iou * 100))} {'n/a (no annotations)' if ap is None else f'{ap:.4f}'}")
    for k, v in table.items():
        print(f"  {k:<16} {'n/a' if v is None else f'{v:.4f}'}")


def cmd_sweep_alpha(args, out: Path):
    from .metrics import plot_lines, sweep_alpha, write_table
    from .train import predict_split

    model = _load_model(args)
    if model.polar is None:
        raise ValueError("alpha sweep needs a model trained with the polar layer")
    images = predict_split(model, _test_samples(args), pre_nms=True)
    alphas = _floats(args.alphas)
    rows = sweep_alpha(images, alphas, args.iou, model.config.nms_iou, args.n)
    write_table(out / "alpha_sweep.csv", ["alpha", "AP50", f"top{args.n}_accuracy"],
                [(a, "n/a" if ap is None else ap, acc) for a, ap, acc in rows])
    plot_lines(out / "alpha_sweep.svg",
               {"AP50": ([r[0] for r in rows], [r[1] or 0.0 for r in rows]),
                f"top-{args.n} accuracy": ([r[0] for r in rows], [r[2] for r in rows])},
               "alpha", "score", "Fusion weight sweep")
    print(f"{'alpha':>6} {'AP50':>8} {f'top-{args.n}':>8}")
    for a, ap, acc in rows:
        print(f"{a:>6.2f} {'n/a' if ap is None else f'{ap:.4f}':>8} {acc:>8.4f}")


def cmd_sweep_scale(args, out: Path):
    from .detector import DetectorModel
    from .metrics import ap_table, write_table
    from .train import predict_split, train

    stages = _ints(args.stages)
    samples = _test_samples(args, args.manifest)
    rows = []
    for st in stages:
        model = DetectorModel(_model_config(args, stage=st), seed=args.seed)
        train(model, args.manifest, _train_config(args), out / f"stage{st}")
        model.save(out / f"stage{st}" / "model.tdk")
        t = ap_table(predict_split(model, samples))
        rows.append((f"2^{st}", t["AP50"], t["AP60"], t["AP70"]))
        print(f"2^{st}: AP50 {t['AP50']:.4f} AP60 {t['AP60']:.4f} AP70 {t['AP70']:.4f}", flush=True)
    write_table(out / "scale_sweep.csv", ["scale", "AP50", "AP60", "AP70"], rows)
    print(f"{'Scale':<8}{'AP50':>8}{'AP60':>8}{'AP70':>8}")
    for r in rows:
        print(f"{r[0]:<8}" + "".join(f"{v:>8.4f}" for v in r[1:]))


def cmd_infer_wsi(args, out: Path):
    from .wsi import TiledSlide, recovered, run_slide, write_outputs

    model = _load_model(args)
    slide = TiledSlide(args.slide)
    res = run_slide(model, slide, args.n, args.workers, args.overlap)
    write_outputs(res, out)
    print(f"{slide.slide_id}: {res.n_tiles} tiles, {len(res.detections)} detections, "
          f"{res.timings['wall_ms']:.0f} ms")
    if res.partial:
        print(f"warning: {len(res.failed)} tiles could not be read; result is partial")
    truth = slide.ground_truth()
    if truth:
        print(f"planted objects in top-{args.n}: {recovered(res, truth)}/{len(truth)}")


def cmd_bench(args, out: Path):
    from .detector import DetectorConfig, DetectorModel
    from .wsi import TiledSlide, bench, format_cost_table, polar_overhead

    ov = polar_overhead(args.width, args.grid, args.repeats, args.seed)
    (out / "overhead.json").write_text(json.dumps(ov, indent=1))
    print(f"per-tile latency at {ov['features']} features: baseline {ov['baseline_ms']:.2f} ms, "
          f"polar +{ov['polar_ms']:.2f} ms ({100 * ov['ratio']:.1f}%)")
    if args.slides:
        slides = [TiledSlide(p) for p in _words(args.slides)]
        if args.model:
            polar = _load_model(args)
            base = DetectorModel.load(args.baseline) if args.baseline else polar.without_polar()
        else:
            polar = DetectorModel(DetectorConfig(width=args.width), seed=args.seed)
            base = polar.without_polar()
        rows = bench({"baseline": base, "baseline+PolarNet": polar}, slides, args.n,
                     args.workers, args.overlap)
        text = format_cost_table(rows, args.n)
        (out / "cost_table.txt").write_text(text + "\n")
        print(text)


def cmd_gradcheck(args, out: Path):
    from .checks import detector_gradcheck, polar_loss_gradcheck

    reports = {"polar_loss": polar_loss_gradcheck(args.seed),
               "detector": detector_gradcheck(args.seed, input_samples=args.input_samples)}
    worst = max(r.max_error for r in reports.values())
    (out / "gradcheck.json").write_text(json.dumps(
        {k: r.errors for k, r in reports.items()}, indent=1))
    for k, r in reports.items():
        print(f"{k}: max relative error {r.max_error:.3e}")
    print(f"max relative gradient error {worst:.3e}")
    if worst >= args.tol:
        print(f"gradient check FAILED (tolerance {args.tol:g})", file=sys.stderr)
        return 1


def cmd_oracle_check(args, out: Path):
    from .checks import oracle_check

    r = oracle_check(args.instances, seed=args.seed)
    print(f"{args.instances} instances: max |PAS diff| {r.errors['pas']:.3e}, "
          f"max |feature diff| {r.errors['features']:.3e}, {r.seconds:.2f} s")
    if r.max_error >= args.tol:
        print(f"oracle check FAILED (tolerance {args.tol:g})", file=sys.stderr)
        return 1


# -- parser --------------------------------------------------------------------

def _model_flags(p, with_model=False):
    if with_model:
        p.add_argument("--model", help="checkpoint (.tdk) written by `train`")
        p.add_argument("--alpha", type=float, default=None, help="fusion weight override")
        p.add_argument("--nms-iou", type=float, default=None, help="NMS IoU override")
        return
    p.add_argument("--stage", type=int, default=5, help="downsampling exponent (2..5)")
    p.add_argument("--width", type=int, default=32, help="feature channels at the last stage")
    p.add_argument("--alpha", type=float, default=0.5, help="fusion weight for p_polar")
    p.add_argument("--polar", type=_bool, default=True, help="enable the polar layer")
    p.add_argument("--padding", choices=("zero", "replicate"), default="zero")
    p.add_argument("--nms-iou", type=float, default=0.45)


def _train_flags(p):
    p.add_argument("--manifest", required=True, help="dataset manifest written by `gen`")
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--milestones", default="",
                   help="comma-separated epochs where lr drops (default: 60%% and 85%% of epochs)")
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--polar-weight", type=float, default=1.0)
    p.add_argument("--max-train", type=int, default=None)
    p.add_argument("--max-val", type=int, default=None)


def _eval_flags(p):
    p.add_argument("--ann", required=True, help="manifest with ground-truth boxes")
    p.add_argument("--split", default="test")
    p.add_argument("--sources", default="gc,fp", help="comma-separated source tags")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--n", type=int, default=20, help="N for top-N accuracy")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="flat key=value file; command-line flags win")
    common.add_argument("--out-dir", default="runs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="polarnet", description="Polar-attention toy detector: data, training, evaluation, "
                                     "slide inference and benchmarks.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "render the synthetic tile dataset and/or mosaic slides")
    p.add_argument("--counts", default="", help="overrides such as train-gc=100,test-fp=40")
    p.add_argument("--difficulty", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--tiles", type=_bool, default=True, help="render the tile dataset")
    p.add_argument("--mosaics", type=int, default=0, help="number of mosaic slides")
    p.add_argument("--mosaic-size", type=int, default=8192)
    p.add_argument("--planted", type=int, default=10, help="planted polar objects per mosaic")

    p = add("train", cmd_train, "train the toy detector")
    _model_flags(p)
    _train_flags(p)

    p = add("eval", cmd_eval, "AP50/60/70, per-class AP and PR export")
    _model_flags(p, with_model=True)
    _eval_flags(p)
    p.add_argument("--preds", help="detection dump to score instead of running a model")

    p = add("sweep-alpha", cmd_sweep_alpha, "AP50 and top-N accuracy across fusion weights")
    _model_flags(p, with_model=True)
    _eval_flags(p)
    p.add_argument("--alphas", default=DEFAULT_ALPHAS)

    p = add("sweep-scale", cmd_sweep_scale, "train and evaluate one model per feature scale")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--stages", default="2,3,4,5")
    p.add_argument("--split", default="test")
    p.add_argument("--sources", default="gc,fp")

    p = add("infer-wsi", cmd_infer_wsi, "tiled inference over one slide directory")
    _model_flags(p, with_model=True)
    p.add_argument("--slide", required=True, help="directory with slide.txt and tile PNGs")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--overlap", type=int, default=128)

    p = add("bench", cmd_bench, "polar-layer overhead and per-slide cost table")
    _model_flags(p, with_model=True)
    p.add_argument("--baseline", help="checkpoint without the polar layer")
    p.add_argument("--slides", default="", help="comma-separated slide directories")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--overlap", type=int, default=128)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every gradient")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--input-samples", type=int, default=256)

    p = add("oracle-check", cmd_oracle_check, "compare kernels with the nested-loop oracle")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-10)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]):
    """Feed ``--config`` values in as subcommand defaults, then parse; explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if not config or command is None:
        return parser.parse_args(argv)
    values = read_config(config)
    sub = choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key in ("config", "func", "command", "help") or key not in actions:
            raise ValueError(f"{config}: unknown setting {key!r} for `{command}`")
        act = actions[key]
        conv = act.type or (lambda v: v)
        defaults[key] = conv(raw) if raw not in ("None", "") else None
        act.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:  # argparse usage errors exit with 2
        return int(e.code or 0)
    except (OSError, ValueError) as e:
        print(f"polarnet: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    out = Path(args.out_dir)
    try:
        write_resolved(args, out)
        rc = args.func(args, out)
    except Exception as e:  # any module error becomes a one-line diagnostic
        msg = str(e).splitlines()[0] if str(e) else ""
        print(f"polarnet: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
