"""``mcnet`` command line: synth, train, eval, predict, audit.

Settings resolve in three layers: built-in defaults, then a flat JSON file
given with ``--config``, then explicit flags.  Every command is a pure
function of those settings and its input files.  On failure the process
exits nonzero after printing one line ``error: <ClassName>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mcnet import __version__
from mcnet.data import (
    BRATS_MODALITIES,
    load_manifest,
    load_pgm,
    load_samples,
    save_pgm,
    split_dataset,
    synth_dataset,
    write_dataset,
)
from mcnet.engine.optim import AdamConfig
from mcnet.errors import (
    CheckpointMismatchError,
    ConfigError,
    MCNetError,
    NonFiniteLossError,
    ShapeError,
    UsageError,
)
from mcnet.metrics import evaluate_dataset, labels_from_probs
from mcnet.model import (
    REFERENCE_PARAMS,
    STRATEGIES,
    ModelConfig,
    assemble_model,
    fit,
    load_checkpoint,
    save_checkpoint,
    shape_audit,
)
from mcnet.plotting import plot_loss_curves, plot_metrics, plot_parameter_counts

log = logging.getLogger("mcnet")

CHECKPOINT_NAME = "checkpoint.mcnt"
TASKS = ("binary", "chaos", "brats")

# Run-level settings and their defaults.  Keys double as JSON config keys and
# (with dashes) as flag names.
DEFAULTS = {
    "seed": 0,
    "out": "run",
    # data
    "data": None,
    "synth": False,
    "n_samples": 16,
    "side": None,
    "n_classes": 2,
    "in_channels": 1,
    "noise": 0.06,
    "split": "3:2",
    "subset": "test",
    "task": None,
    # model
    "depth": None,
    "width": None,
    "widths": None,
    "strategy": "full",
    "bn_order": None,
    "cross_mapping": None,
    "dtype": None,
    # optimisation
    "epochs": 400,
    "batch_size": 4,
    "lr": 1e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "stop_loss": None,
}
MODEL_KEYS = ("depth", "width", "widths", "bn_order", "cross_mapping", "dtype")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON file of settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    src = data.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="dataset root (images/, masks/)")
    src.add_argument("--synth", action="store_true", default=None,
                     help="use a generated dataset instead of --data")
    data.add_argument("--n-samples", type=int)
    data.add_argument("--side", type=int, help="network input side (images are resized)")
    data.add_argument("--n-classes", type=int, help="classes incl. background (synthetic data)")
    data.add_argument("--in-channels", type=int)
    data.add_argument("--noise", type=float)
    data.add_argument("--split", help="train:test ratio, or 'none' to train on everything")
    data.add_argument("--task", choices=TASKS)

    model = _Parser(add_help=False)
    model.add_argument("--depth", type=int)
    model.add_argument("--width", type=int, help="same filter count at every stage")
    model.add_argument("--widths", type=_int_list, help="encoder widths, e.g. 24,48,96")
    model.add_argument("--strategy", choices=sorted(STRATEGIES))
    model.add_argument("--bn-order", choices=("relu_then_bn", "bn_then_relu"))
    model.add_argument("--cross-mapping", choices=("cyclic", "anticyclic", "aligned"))
    model.add_argument("--dtype", choices=("float32", "float64"))

    p = _Parser(prog="mcnet", description="MC-Net segmentation toolkit")
    p.add_argument("--version", action="version", version=f"mcnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n-samples", type=int)
    s.add_argument("--side", type=int)
    s.add_argument("--n-classes", type=int)
    s.add_argument("--in-channels", type=int)
    s.add_argument("--noise", type=float)

    t = sub.add_parser("train", parents=[common, data, model], help="train a model")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--eps", type=float)
    t.add_argument("--stop-loss", type=float, help="stop once the epoch train loss is below this")

    e = sub.add_parser("eval", parents=[common, data, model], help="score a checkpoint")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--subset", choices=("train", "test", "all"))
    e.add_argument("--batch-size", type=int)

    r = sub.add_parser("predict", parents=[common], help="segment one image")
    r.add_argument("--checkpoint", type=Path)
    r.add_argument("--image", type=Path, action="append", required=True,
                   help="PGM input; repeat once per modality for multichannel models")
    r.add_argument("--visual", action="store_true", help="also write a contrast-scaled mask")

    a = sub.add_parser("audit", parents=[common, model], help="shape and parameter audit")
    a.add_argument("--side", type=int)
    a.add_argument("--n-classes", type=int)
    a.add_argument("--in-channels", type=int)
    return p


# ---------------------------------------------------------------------------
# settings


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    loaded = {}
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        unknown = set(loaded) - set(DEFAULTS) - {"model"}
        if unknown:
            raise ConfigError(f"{args.config}: unknown settings {sorted(unknown)}")
        settings.update(loaded)
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None}
    settings.update(flags)
    if isinstance(settings.get("widths"), str):
        settings["widths"] = _int_list(settings["widths"])
    for key in ("out", "data"):
        if settings.get(key) is not None:
            settings[key] = str(settings[key])
    # did the user describe a model, as opposed to relying on a checkpoint?
    model_keys = set(MODEL_KEYS) | {"model", "strategy"}
    settings["_explicit_model"] = bool(model_keys & (set(loaded) | set(flags)))
    return settings


def model_config(settings: dict, in_channels: int, n_classes: int, side: int | None) -> ModelConfig:
    """ModelConfig from flat settings (or an embedded ``model`` dict)."""
    seed = int(settings["seed"])
    if settings.get("model"):
        cfg = ModelConfig.from_dict(dict(settings["model"]))
        return replace(cfg, seed=seed)
    kw = {"in_channels": in_channels, "n_classes": n_classes, "seed": seed}
    if side is not None:
        kw["input_size"] = side
    if settings.get("bn_order"):
        kw["bn_relu_order"] = settings["bn_order"]
    if settings.get("cross_mapping"):
        kw["cross_mapping"] = settings["cross_mapping"]
    if settings.get("dtype"):
        kw["dtype"] = settings["dtype"]
    depth = settings.get("depth")
    if settings.get("widths"):
        widths = list(settings["widths"])
        if depth is not None and depth != len(widths):
            raise ConfigError(f"--depth {depth} disagrees with {len(widths)} widths")
        cfg = ModelConfig.from_encoder_widths(widths, **kw)
    elif settings.get("width"):
        cfg = ModelConfig.uniform(depth or 5, int(settings["width"]), **kw)
    else:
        cfg = ModelConfig.for_depth(depth or 5, **kw)
    return cfg.with_strategy(settings["strategy"])


def _parse_split(text):
    if str(text).lower() == "none":
        return None
    try:
        a, b = (int(x) for x in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"split must look like 3:2 or be 'none', got {text!r}")
    return a, b


# ---------------------------------------------------------------------------
# data


def load_data(settings: dict, side: int | None):
    """Return ``(samples, n_classes, in_channels, task, side)``."""
    if settings.get("data"):
        manifest = load_manifest(settings["data"])
        side = side or 256
        samples = load_samples(manifest, side)
        n_classes, in_channels = manifest.n_classes, manifest.in_channels
        default_task = "brats" if tuple(manifest.modalities) == BRATS_MODALITIES else None
    elif settings.get("synth"):
        side = side or 64
        n_classes, in_channels = int(settings["n_classes"]), int(settings["in_channels"])
        samples = synth_dataset(int(settings["seed"]), int(settings["n_samples"]), side,
                                n_classes, in_channels, float(settings["noise"]))
        default_task = None
    else:
        raise ConfigError("no dataset: pass --data DIR or --synth")
    task = settings.get("task") or default_task or ("binary" if n_classes == 2 else "chaos")
    if task == "binary" and n_classes != 2:
        raise ConfigError(f"task binary needs 2 classes, dataset has {n_classes}")
    if task == "brats" and n_classes != 4:
        raise ConfigError(f"task brats needs labels 0..3, dataset declares {n_classes} classes")
    return samples, n_classes, in_channels, task, side


def split_samples(samples, settings):
    ratio = _parse_split(settings["split"])
    if ratio is None:
        return list(samples), []
    return split_dataset(samples, ratio, int(settings["seed"]))


def _head_classes(n_classes: int) -> int:
    return 1 if n_classes == 2 else n_classes


# ---------------------------------------------------------------------------
# outputs


def loss_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "test_loss"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), "" if r.test_loss is None else repr(r.test_loss)])
    return buf.getvalue()


def _out_dir(settings) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _public(settings):
    return {k: v for k, v in settings.items() if not k.startswith("_")}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(settings) -> int:
    out = _out_dir(settings)
    side = settings["side"] or 64
    n_classes, in_channels = int(settings["n_classes"]), int(settings["in_channels"])
    samples = synth_dataset(int(settings["seed"]), int(settings["n_samples"]), side, n_classes,
                            in_channels, float(settings["noise"]))
    modalities = () if in_channels == 1 else (
        BRATS_MODALITIES if in_channels == 4 else tuple(f"m{i}" for i in range(in_channels)))
    write_dataset(samples, out, n_classes, modalities)
    print(f"wrote {len(samples)} samples ({side}x{side}, {n_classes} classes) to {out}")
    return 0


def cmd_train(settings) -> int:
    samples, n_classes, in_channels, task, side = load_data(settings, settings.get("side"))
    cfg = model_config(settings, in_channels, _head_classes(n_classes), side)
    if cfg.input_size != side:
        raise ConfigError(f"model input size {cfg.input_size} differs from data side {side}")
    train, test = split_samples(samples, settings)
    out = _out_dir(settings)
    resolved = _public(settings) | {"task": task, "side": side, "model": cfg.to_dict()}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    model = assemble_model(cfg)
    opt = AdamConfig(float(settings["lr"]), float(settings["beta1"]), float(settings["beta2"]),
                     float(settings["eps"]))
    history = []
    stop_loss = settings.get("stop_loss")
    stop = None if stop_loss is None else (lambda _m, rec: rec.train_loss < float(stop_loss))
    ckpt = out / CHECKPOINT_NAME
    aborted = Path(str(ckpt) + ".aborted")
    aborted.unlink(missing_ok=True)
    log.info("training %s (%d parameters) on %d samples, testing on %d",
             cfg.strategy, model.parameter_count(), len(train), len(test))
    try:
        fit(model, train, int(settings["epochs"]), int(settings["batch_size"]), opt,
            seed=int(settings["seed"]), test_samples=test or None, on_epoch=history.append,
            stop_when=stop)
    except NonFiniteLossError as exc:
        save_checkpoint(model, ckpt)
        aborted.write_text(f"{exc}\ncompleted epochs: {len(history)}\n", encoding="utf-8")
        (out / "loss.csv").write_text(loss_csv(history), encoding="utf-8")
        raise
    save_checkpoint(model, ckpt)
    (out / "loss.csv").write_text(loss_csv(history), encoding="utf-8")
    if history:
        plot_loss_curves(history, out / "loss.png", title=f"MC-Net ({cfg.strategy})")
    sys.stdout.write(loss_csv(history))
    return 0


def _checkpoint_path(settings, args) -> Path:
    path = getattr(args, "checkpoint", None) or Path(settings["out"]) / CHECKPOINT_NAME
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return Path(path)


def cmd_eval(settings, args) -> int:
    path = _checkpoint_path(settings, args)
    from mcnet.model.checkpoint import read_checkpoint

    saved_cfg, _ = read_checkpoint(path.read_bytes())
    samples, n_classes, in_channels, task, side = load_data(
        settings, settings.get("side") or saved_cfg.input_size)
    expected = None
    if settings["_explicit_model"]:
        expected = model_config(settings, in_channels, _head_classes(n_classes), side)
    model = load_checkpoint(path, expected)
    cfg = model.config
    if (cfg.in_channels, cfg.input_size) != (in_channels, side):
        raise CheckpointMismatchError(
            f"checkpoint expects {cfg.in_channels}x{cfg.input_size}x{cfg.input_size} inputs, "
            f"data is {in_channels}x{side}x{side}")
    if cfg.n_classes != _head_classes(n_classes):
        raise CheckpointMismatchError(
            f"checkpoint predicts {cfg.n_classes} channels, data has {n_classes} classes")
    train, test = split_samples(samples, settings)
    chosen = {"train": train, "test": test, "all": list(samples)}[settings["subset"]]
    report = evaluate_dataset(model, chosen, task, int(settings["batch_size"]))
    out = _out_dir(settings)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    plot_metrics(report, out / "metrics.png")
    sys.stdout.write(report.to_text())
    return 0


def cmd_predict(settings, args) -> int:
    model = load_checkpoint(_checkpoint_path(settings, args))
    cfg = model.config
    if len(args.image) != cfg.in_channels:
        raise ShapeError(f"model takes {cfg.in_channels} image channel(s), got {len(args.image)}")
    channels = []
    for f in args.image:
        pixels, maxval = load_pgm(f)
        if pixels.shape != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"{f} is {pixels.shape[1]}x{pixels.shape[0]}; this model requires "
                             f"{cfg.input_size}x{cfg.input_size}")
        channels.append(pixels.astype(np.float64) / maxval)
    image = np.stack(channels)[None].astype(np.float32)
    labels = labels_from_probs(model.forward(image, mode="eval").data)[0]
    out = _out_dir(settings)
    stem = Path(args.image[0]).name.split(".")[0]
    mask_path = save_pgm(labels.astype(np.uint8), out / f"{stem}.mask.pgm", maxval=255)
    print(f"mask: {mask_path}")
    if args.visual:
        n_labels = max(2, cfg.n_classes if cfg.n_classes > 1 else 2)
        vis = (labels * (255 // (n_labels - 1))).astype(np.uint8)
        vis_path = save_pgm(vis, out / f"{stem}.vis.pgm", maxval=255)
        print(f"visual: {vis_path}")
    return 0


def cmd_audit(settings) -> int:
    in_channels = int(settings["in_channels"])
    head = _head_classes(int(settings["n_classes"]))
    cfg = model_config(settings, in_channels, head, settings.get("side"))
    report = shape_audit(assemble_model(cfg))
    rows = []
    for depth in range(2, 6):
        kw = dict(in_channels=in_channels, n_classes=head, seed=cfg.seed,
                  bn_relu_order=cfg.bn_relu_order, cross_mapping=cfg.cross_mapping)
        if settings.get("side"):
            kw["input_size"] = settings["side"]
        c = ModelConfig.for_depth(depth, **kw).with_strategy(cfg.strategy)
        rows.append((f"MC-Net({depth})", depth, cfg.strategy, assemble_model(c).parameter_count()))
    for strategy in ("full", "1", "2", "none"):
        c = cfg.with_strategy(strategy)
        rows.append((f"strategy {strategy}", cfg.depth, strategy,
                     assemble_model(c).parameter_count()))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "depth", "strategy", "params", "ratio_to_6.8M"])
    for label, depth, strategy, n in rows:
        w.writerow([label, depth, strategy, n, f"{n / REFERENCE_PARAMS:.4f}"])
    sweep = buf.getvalue()

    out = _out_dir(settings)
    text = report.to_text() + "\nvariant sweep\n" + sweep
    (out / "audit.txt").write_text(text, encoding="utf-8")
    (out / "audit.csv").write_text(sweep, encoding="utf-8")
    plot_parameter_counts([(r[0], r[3]) for r in rows], out / "params.png", REFERENCE_PARAMS)
    print(f"total parameters: {report.total_params} "
          f"(reference {REFERENCE_PARAMS}, ratio {report.reference_ratio():.3f})")
    sys.stdout.write(sweep)
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    settings = resolve_settings(args)
    if args.command == "synth":
        return cmd_synth(settings)
    if args.command == "train":
        return cmd_train(settings)
    if args.command == "eval":
        return cmd_eval(settings, args)
    if args.command == "predict":
        return cmd_predict(settings, args)
    return cmd_audit(settings)


def main(argv=None) -> int:
    try:
        return run(argv)
    except (MCNetError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        message = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1 if isinstance(exc, MCNetError) else 2


if __name__ == "__main__":
    sys.exit(main())
