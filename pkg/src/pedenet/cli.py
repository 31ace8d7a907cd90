"""Command-line entry point: synth, train, eval, score and report.

Settings resolve in three layers: built-in defaults, then a ``--config``
file of ``key=value`` lines (``#`` starts a comment), then explicit flags.
Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from pedenet.dataset import generate_synthetic_class, load_class, read_image
from pedenet.errors import PedenetError, SingularMatrixError
from pedenet.evaluation import evaluate_class, format_table, read_reports, render_heatmap, write_reports
from pedenet.scoring import AGGREGATIONS, BACKENDS, DEFAULT_STRIDE, anomaly_map, build_gallery, load_gallery, save_gallery
from pedenet.training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("pedenet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

_TRAIN_DEFAULTS = TrainConfig()
TRAIN_HELP = {
    "lambda1": "weight of the density-estimation loss",
    "lambda2": "weight of the location-prediction loss",
    "lambda3": "weight of the covariance-diagonal regulariser",
    "K": "number of mixture components",
    "batch_den": "patches per density-estimation batch",
    "batch_lp_pairs": "neighbour pairs per location-prediction batch",
    "learning_rate": "Adam learning rate",
    "steps": "number of joint optimisation steps",
    "seed": "random seed for initialisation and sampling",
    "jitter": "max random shift (px) of the neighbour patch",
    "dtype": "network float width, 32 or 64",
    "den_objective": "density loss form: mean_nll or log_mean",
    "normalizer": "Gaussian normalising constant: standard or printed",
    "cov_eps": "ridge added to covariance diagonals before factorisation",
    "ema_decay": "decay of the running GMM parameter average",
}

# non-TrainConfig settings shared by several commands
COMMON_DEFAULTS = {
    "data_root": "./data",
    "class_name": "synthetic",
    "checkpoint": None,
    "out": "./out",
    "stride": DEFAULT_STRIDE,
    "backend": "exact",
    "aggregation": "mean",
    "n_train": 20,
    "n_test": 20,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    helps = {
        "data_root": ("--data-root", "dataset root holding <class>/train, test, ground_truth"),
        "class_name": ("--class", "class directory name"),
        "checkpoint": ("--checkpoint", "model checkpoint path (default: <out>/model.ckpt)"),
        "out": ("--out", "output directory"),
        "stride": ("--stride", "grid stride S for gallery and test patches"),
        "backend": ("--backend", "nearest-neighbour backend"),
        "aggregation": ("--aggregation", "pixel aggregation over covering patches"),
    }
    for name in names:
        flag, text = helps[name]
        kwargs = {"dest": name, "default": None}
        default = COMMON_DEFAULTS[name]
        if default is not None:
            text += f" (default: {default})"
        if name == "stride":
            kwargs["type"] = int
        if name == "backend":
            kwargs["choices"] = BACKENDS
        if name == "aggregation":
            kwargs["choices"] = AGGREGATIONS
        p.add_argument(flag, help=text, **kwargs)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainConfig):
        kind = {"float": float, "int": int}.get(f.type, str)
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=kind, default=None,
                       help=f"{TRAIN_HELP[f.name]} (default: {getattr(_TRAIN_DEFAULTS, f.name)})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pedenet", description="Patch-embedding anomaly localization.")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic class in MVTec layout")
    p.add_argument("--config", help="key=value settings file; flags take precedence")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: 7)")
    p.add_argument("--n-train", dest="n_train", type=int, default=None, help="normal training images (default: 20)")
    p.add_argument("--n-test", dest="n_test", type=int, default=None, help="test images, half defective (default: 20)")
    _add_common(p, "out", "class_name")

    p = sub.add_parser("train", help="train a model on one class")
    p.add_argument("--config", help="key=value settings file; flags take precedence")
    _add_common(p, "data_root", "class_name", "checkpoint", "out")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="score every test image, write report and heatmaps")
    p.add_argument("--config", help="key=value settings file; flags take precedence")
    _add_common(p, "data_root", "class_name", "checkpoint", "out", "stride", "backend", "aggregation")

    p = sub.add_parser("score", help="score a single image and write its heatmap")
    p.add_argument("--config", help="key=value settings file; flags take precedence")
    p.add_argument("--image", required=True, help="input image path")
    p.add_argument("--gallery", default=None, help="saved gallery (default: build from the class training images)")
    _add_common(p, "data_root", "class_name", "checkpoint", "out", "stride", "backend", "aggregation")

    p = sub.add_parser("report", help="aggregate per-class report.kv files into one table")
    p.add_argument("reports", nargs="+", help="report.kv files")
    p.add_argument("--out", default=None, help="write the table here as well as to stdout")
    return parser


def resolve(args: argparse.Namespace) -> dict[str, object]:
    """Merge defaults, config file and flags into one settings dict."""
    settings: dict[str, object] = dict(COMMON_DEFAULTS)
    settings["seed"] = 7 if args.command == "synth" else _TRAIN_DEFAULTS.seed
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        if "class" in file_values:
            file_values["class_name"] = file_values.pop("class")
        settings.update(file_values)
    settings.update({k: v for k, v in vars(args).items() if v is not None})
    for key in ("stride", "n_train", "n_test", "seed"):
        if settings.get(key) is not None:
            try:
                settings[key] = int(settings[key])
            except ValueError as exc:
                raise UsageError(f"{key} must be an integer, got {settings[key]!r}") from exc
    if settings["checkpoint"] is None:
        settings["checkpoint"] = str(Path(str(settings["out"])) / "model.ckpt")
    return settings


def _train_config(settings: dict[str, object]) -> TrainConfig:
    try:
        return TrainConfig.from_mapping(settings)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(s: dict[str, object]) -> int:
    out = Path(str(s["out"]))
    try:
        generate_synthetic_class(out, seed=int(s["seed"]), n_train=int(s["n_train"]),
                                        n_test=int(s["n_test"]), class_name=str(s["class_name"]))
    except OSError as exc:
        print(f"error: cannot write to {exc.filename or out}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    n_def = int(s["n_test"]) // 2
    print(f"wrote {out / str(s['class_name'])}: train/good={s['n_train']} test/good={int(s['n_test']) - n_def} test/defect={n_def}")
    return EXIT_OK


def cmd_train(s: dict[str, object]) -> int:
    config = _train_config(s)
    dataset = load_class(s["data_root"], str(s["class_name"]))
    out = Path(str(s["out"]))
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss.log"
    state = train(dataset, config, log_path=log_path)
    save_checkpoint(state, s["checkpoint"])
    print(f"trained {state.step} steps; checkpoint {s['checkpoint']}; loss log {log_path}")
    return EXIT_OK


def _load_model(s: dict[str, object]):
    path = Path(str(s["checkpoint"]))
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path).model


def cmd_eval(s: dict[str, object]) -> int:
    model = _load_model(s)
    dataset = load_class(s["data_root"], str(s["class_name"]))
    out = Path(str(s["out"]))
    heat_dir = out / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    stride = int(s["stride"])
    gallery = build_gallery(model, dataset.train_images, stride)
    save_gallery(gallery, out / "gallery.bin")
    result = evaluate_class(model, gallery, dataset, stride, str(s["backend"]), str(s["aggregation"]))
    for sample, amap in zip(dataset.test_images, result.maps):
        name = sample.name.replace("/", "_").rsplit(".", 1)[0] + ".png"
        render_heatmap(sample.image, amap, heat_dir / name)
    table, kv = write_reports([result.report], out)
    print(format_table([result.report]), end="")
    print(f"gallery rows {len(gallery)}; report {table}, {kv}; heatmaps {heat_dir}")
    return EXIT_OK


def cmd_score(s: dict[str, object]) -> int:
    model = _load_model(s)
    image_path = Path(str(s["image"]))
    if not image_path.is_file():
        raise UsageError(f"image not found: {image_path}")
    stride = int(s["stride"])
    if s.get("gallery"):
        gallery = load_gallery(s["gallery"])
    else:
        gallery = build_gallery(model, load_class(s["data_root"], str(s["class_name"])).train_images, stride)
    image = read_image(image_path)
    amap = anomaly_map(model, gallery, image, stride, str(s["backend"]), str(s["aggregation"]))
    out = Path(str(s["out"]))
    out.mkdir(parents=True, exist_ok=True)
    heat = out / f"{image_path.stem}_heatmap.png"
    render_heatmap(image, amap, heat)
    print(f"image_score={amap.image_score!r} heatmap={heat}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for path in args.reports:
        if not Path(path).is_file():
            raise UsageError(f"report not found: {path}")
        reports.extend(read_reports(path))
    table = format_table(reports)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "score": cmd_score}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(message)s")
        if args.command == "report":
            return cmd_report(args)
        return COMMANDS[args.command](resolve(args))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SingularMatrixError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PedenetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
