"""Command-line pipeline: stitch, extract, autolabel, train, score, eval, synth.

Every subcommand writes a manifest recording the resolved arguments beside
its outputs, so a run can be reproduced from the manifest alone. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import extract as extract_mod
from . import montage as montage_mod
from .autolabel import ScoreVector, brightness_score, squareness_score, write_labels
from .errors import DataError, DegenerateMontage, IoFailure, NumericFailure, XCryoError
from .model import ATTENTION_ATTRIBUTES, ModelConfig, XCryoNet
from .mrc_io import read_mrc
from .synthgrid import generate_corpus
from .train import (Dataset, TrainConfig, aggregate_reports, evaluate,
                    predict_dataset, run_training)

PROG = "xcryonet"

SUPERVISION_FOR_MODE = {"fs": "fully_supervised", "ss": "semi_supervised"}


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def write_run_manifest(path, subcommand: str, args: argparse.Namespace,
                       inputs: dict, outputs: dict, started: str,
                       seed=None) -> None:
    """Record everything needed to reproduce one subcommand invocation."""
    resolved = {
        k: _jsonable(v) for k, v in vars(args).items()
        if k not in ("func", "subcommand") and not k.startswith("_")
    }
    manifest = {
        "subcommand": subcommand,
        "config": _jsonable(getattr(args, "config", None)),
        "arguments": resolved,
        "inputs": _jsonable(inputs),
        "outputs": _jsonable(outputs),
        "seed": seed,
        "started": started,
        "finished": _utc_now(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(out_path: Path, is_dir: bool) -> Path:
    if is_dir:
        return out_path / "manifest.json"
    return out_path.parent / (out_path.stem + ".manifest.json")


def _load_image_file(path) -> np.ndarray:
    """A montage or crop as float32 (H, W); MRC volumes use their first section."""
    path = Path(path)
    if path.suffix.lower() in (".mrc", ".mrcs", ".map"):
        return read_mrc(path).data[0]
    try:
        with Image.open(path) as im:
            if im.mode in ("I", "I;16"):
                return np.asarray(im, dtype=np.float32) / 65535.0
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise IoFailure(f"cannot open image {path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot decode image {path}: {exc}") from exc


def _save_png16(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 65535.0 + 0.5).astype(np.uint16)).save(path)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_stitch(args) -> int:
    started = _utc_now()
    positions = montage_mod.load_manifest(args.manifest)
    result = montage_mod.stitch(positions, rows=args.rows, cols=args.cols)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    montage_mod.export_montage(result, out)
    placements_path = out.parent / (out.stem + ".placements.json")
    placements_path.write_text(
        json.dumps(montage_mod.placements_as_json(result), indent=2) + "\n"
    )
    write_run_manifest(
        _manifest_path(out, is_dir=False), "stitch", args, started=started,
        inputs={"manifest": args.manifest},
        outputs={"montage": out, "placements": placements_path},
    )
    print(f"stitched {len(positions)} tiles -> {out}")
    return 0


def cmd_extract(args) -> int:
    started = _utc_now()
    image = _load_image_file(args.montage)
    template_side = args.template_side
    if template_side is None:
        template_side = max(8, int(round(args.side * 0.875)))
    min_sep = args.min_separation
    if min_sep is None:
        min_sep = max(1, template_side // 2)
    try:
        template = extract_mod.build_template(image, template_side)
        scores = extract_mod.ncc_map(image, template)
        peaks = extract_mod.pick_peaks(scores, threshold=args.threshold,
                                       min_separation=min_sep, max_count=args.max_count)
    except DegenerateMontage:
        # a featureless montage simply contains nothing to extract
        peaks = []
    half = template_side // 2
    centers = [(r + half, c + half, v) for r, c, v in peaks]
    squares = extract_mod.crop_squares(image, [(r, c) for r, c, _ in centers],
                                       args.side, source_grid=str(args.montage))

    out_dir = Path(args.out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    index_rows = []
    for i, (square, (r, c, v)) in enumerate(zip(squares, centers)):
        square_id = f"sq_{i:06d}"
        _save_png16(out_dir / "crops" / f"{square_id}.png", square.pixels)
        index_rows.append((square_id, r, c, v))
    index_path = out_dir / "index.csv"
    with open(index_path, "w", newline="") as fh:
        fh.write("id,center_row,center_col,ncc_score\n")
        for square_id, r, c, v in index_rows:
            fh.write(f"{square_id},{r},{c},{v:.6f}\n")
    write_run_manifest(
        _manifest_path(out_dir, is_dir=True), "extract", args, started=started,
        inputs={"montage": args.montage},
        outputs={"crops": out_dir / "crops", "index": index_path,
                 "count": len(squares)},
    )
    print(f"extracted {len(squares)} squares -> {out_dir}")
    return 0


def cmd_autolabel(args) -> int:
    started = _utc_now()
    crops_dir = Path(args.crops_dir)
    paths = sorted(crops_dir.glob("*.png"))
    if not paths and (crops_dir / "crops").is_dir():
        crops_dir = crops_dir / "crops"
        paths = sorted(crops_dir.glob("*.png"))
    labels = {}
    for path in paths:
        pixels = _load_image_file(path)
        y_b = int(np.clip(np.floor(brightness_score(pixels) + 0.5), 0, 4))
        y_s = int(np.clip(np.floor(squareness_score(pixels) + 0.5), 0, 4))
        labels[path.stem] = ScoreVector(y_b=y_b, y_s=y_s)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_labels(out, labels)
    write_run_manifest(
        _manifest_path(out, is_dir=False), "autolabel", args, started=started,
        inputs={"crops_dir": crops_dir}, outputs={"labels": out, "count": len(labels)},
    )
    print(f"autolabeled {len(labels)} squares -> {out}")
    return 0


def _model_config_from_args(args, data: Dataset) -> ModelConfig:
    input_size = args.input_size
    if input_size is None:
        input_size = int(data.images.shape[2])
    return ModelConfig(
        input_size=input_size,
        feature_channels=args.feature_channels,
        classifier_hidden=args.classifier_hidden,
        overall_hidden=args.overall_hidden,
    )


def cmd_train(args) -> int:
    started = _utc_now()
    corpus = Dataset.from_corpus(args.corpus, labels_name=args.labels_name)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        labeled_count=args.labeled,
        unlabeled_count=args.unlabeled,
        arch=args.arch,
        supervision=SUPERVISION_FOR_MODE[args.mode],
        checkpoint_every=args.checkpoint_every,
        model=_model_config_from_args(args, corpus),
    )
    out_dir = Path(args.out_dir)

    def log(epoch, report):
        if args.quiet:
            return
        print(f"epoch {epoch:4d}  L_p {report.L_p:.4f}  L_cr {report.L_cr:.4f}  "
              f"L_co {report.L_co:.4f}  L_f {report.L_f:.4f}")

    result = run_training(config, corpus, out_dir=out_dir, log=log)
    outputs = {
        "checkpoint": out_dir / "checkpoint_final.xcn",
        "losses": out_dir / "losses.csv",
        "config": out_dir / "config.json",
    }
    if result.mae is not None:
        outputs["mae_report"] = out_dir / "mae_report.json"
        print("held-out MAE: " + json.dumps(result.mae, sort_keys=True))
    write_run_manifest(
        _manifest_path(out_dir, is_dir=True), "train", args, started=started,
        inputs={"corpus": args.corpus}, outputs=outputs, seed=args.seed,
    )
    final = result.history[-1]
    print(f"trained {config.epochs} epochs (final L_p {final.L_p:.4f}) -> {out_dir}")
    return 0


def _load_checkpoint(path):
    model, meta = XCryoNet.load(path)
    arch = meta.get("arch", "full_xcryonet")
    return model, arch, meta


def _overlay(gray: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Blend a grayscale square with an attention colormap (blue low, red high)."""
    g = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    a = np.clip(np.asarray(attention, dtype=np.float64), 0.0, 1.0)
    color = np.stack([a, np.full_like(a, 0.2), 1.0 - a], axis=-1)
    blended = 0.6 * g[..., None] + 0.4 * color
    return (np.clip(blended, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def cmd_score(args) -> int:
    started = _utc_now()
    model, arch, _ = _load_checkpoint(args.checkpoint)
    crops_dir = Path(args.crops_dir)
    paths = sorted(crops_dir.glob("*.png"))
    if not paths and (crops_dir / "crops").is_dir():
        crops_dir = crops_dir / "crops"
        paths = sorted(crops_dir.glob("*.png"))
    if not paths:
        raise IoFailure(f"no PNG squares under {crops_dir}")
    images = np.stack([_load_image_file(p) for p in paths]).astype(np.float32)
    ids = [p.stem for p in paths]
    data = Dataset.from_arrays(images, ids=ids)

    preds = np.clip(predict_dataset(model, data, arch=arch, batch_size=args.batch_size),
                    0.0, 4.0)
    out_dir = Path(args.out_dir)
    overlay_dir = out_dir / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)

    pred_path = out_dir / "predictions.csv"
    with open(pred_path, "w", newline="") as fh:
        fh.write("id,y_b,y_s,y_cr,y_co,y_o\n")
        for i, square_id in enumerate(ids):
            cells = ",".join(f"{v:.4f}" for v in preds[i])
            fh.write(f"{square_id},{cells}\n")

    overlay_count = 0
    for start in range(0, data.n, args.batch_size):
        stop = min(start + args.batch_size, data.n)
        maps = model.attention_maps(data.images[start:stop])
        for attribute in ATTENTION_ATTRIBUTES:
            for j in range(stop - start):
                rgb = _overlay(data.images[start + j, 0], maps[attribute][j, 0])
                name = f"{ids[start + j]}_{attribute}.png"
                Image.fromarray(rgb, mode="RGB").save(overlay_dir / name)
                overlay_count += 1

    write_run_manifest(
        _manifest_path(out_dir, is_dir=True), "score", args, started=started,
        inputs={"checkpoint": args.checkpoint, "crops_dir": crops_dir},
        outputs={"predictions": pred_path, "overlays": overlay_dir,
                 "squares": len(ids), "overlay_count": overlay_count},
    )
    print(f"scored {len(ids)} squares -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    started = _utc_now()
    if args.runs:
        reports = []
        for run_dir in args.runs:
            report_path = Path(run_dir) / "mae_report.json"
            if not report_path.is_file():
                raise IoFailure(f"no mae_report.json under {run_dir}")
            reports.append(json.loads(report_path.read_text()))
        summary = aggregate_reports(reports)
        payload = {"runs": len(reports), "per_score": summary}
    else:
        if args.checkpoint is None or args.corpus is None:
            return _usage_error("eval needs --runs or a checkpoint and corpus")
        model, arch, _ = _load_checkpoint(args.checkpoint)
        data = Dataset.from_corpus(args.corpus, labels_name=args.labels_name)
        payload = evaluate(model, data, arch=arch, batch_size=args.batch_size)
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        write_run_manifest(
            _manifest_path(out, is_dir=False), "eval", args, started=started,
            inputs={"checkpoint": args.checkpoint, "corpus": args.corpus,
                    "runs": args.runs},
            outputs={"report": out},
        )
    return 0


def _usage_error(message: str) -> int:
    print(f"{PROG}: error: {message}", file=sys.stderr)
    return 1


def cmd_synth(args) -> int:
    started = _utc_now()
    out_dir = Path(args.out_dir)
    corpus = generate_corpus(args.n, args.seed, args.label_fraction,
                             out_dir=out_dir, size=args.size)
    labeled = sum(0 if vec.unlabeled else 1 for vec in corpus.labels.values())
    write_run_manifest(
        _manifest_path(out_dir, is_dir=True), "synth", args, started=started,
        inputs={}, seed=args.seed,
        outputs={"images": out_dir / "images", "labels": out_dir / "labels.csv",
                 "truth": out_dir / "truth.csv", "n": args.n, "labeled": labeled},
    )
    print(f"generated {args.n} squares ({labeled} labeled) -> {out_dir}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="COMMAND")

    p = sub.add_parser("stitch", help="assemble tiles into a montage")
    p.add_argument("manifest", help="JSON list of {tile, x_um, y_um} stage positions")
    p.add_argument("out", help="output montage (.mrc or .png)")
    p.add_argument("--rows", type=int, default=5)
    p.add_argument("--cols", type=int, default=5)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("extract", help="find and crop grid squares from a montage")
    p.add_argument("montage", help="montage image (.mrc or .png)")
    p.add_argument("out_dir", help="output directory for crops and index")
    p.add_argument("--threshold", type=float, default=extract_mod.DEFAULT_THRESHOLD)
    p.add_argument("--max-count", type=int, default=extract_mod.DEFAULT_MAX_COUNT)
    p.add_argument("--side", type=int, default=640, help="crop side in pixels")
    p.add_argument("--template-side", type=int, default=None,
                   help="matching template side (default: 0.875 * side)")
    p.add_argument("--min-separation", type=int, default=None,
                   help="minimum peak separation (default: template side / 2)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("autolabel", help="score brightness and squareness of crops")
    p.add_argument("crops_dir", help="directory of square PNGs")
    p.add_argument("out", help="output label CSV")
    p.set_defaults(func=cmd_autolabel)

    p = sub.add_parser("train", help="train a scoring model on a corpus")
    p.add_argument("corpus", help="corpus directory (images/ plus labels.csv)")
    p.add_argument("out_dir", help="run directory")
    p.add_argument("--arch", choices=("primary_only", "full_xcryonet"),
                   default="full_xcryonet")
    p.add_argument("--mode", choices=("fs", "ss"), default="ss",
                   help="fs: labeled only; ss: labeled plus unlabeled")
    p.add_argument("--labeled", type=int, default=None,
                   help="labeled sample count (default: all labeled rows)")
    p.add_argument("--unlabeled", type=int, default=None,
                   help="unlabeled sample count (default: all, or 0 under fs)")
    p.add_argument("--epochs", type=int, default=75)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels-name", default="labels.csv")
    p.add_argument("--checkpoint-every", type=int, default=25)
    p.add_argument("--input-size", type=int, default=None,
                   help="expected square side (default: corpus image size)")
    p.add_argument("--feature-channels", type=int, default=32)
    p.add_argument("--classifier-hidden", type=int, default=64)
    p.add_argument("--overall-hidden", type=int, default=16)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="predict scores and export attention overlays")
    p.add_argument("checkpoint", help="trained checkpoint file")
    p.add_argument("crops_dir", help="directory of square PNGs")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="MAE report for a checkpoint, or aggregate runs")
    p.add_argument("checkpoint", nargs="?", default=None)
    p.add_argument("corpus", nargs="?", default=None)
    p.add_argument("--labels-name", default="labels.csv")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--runs", nargs="+", default=None,
                   help="aggregate mae_report.json files from these run dirs")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"{PROG}: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"{PROG}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except XCryoError as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{PROG}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
