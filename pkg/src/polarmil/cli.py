"""Command-line entry point tying the modules into reproducible workflows.

Configuration is flat key=value text: defaults, then an optional --config
file, then --set overrides, then explicit flags, later wins.  Every run
echoes its fully-resolved configuration beside its outputs so a run can be
reproduced bit-exactly from the echo alone.  Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .evalmetrics import DiceReport, binarize, dice, dice_stacked, sensitivity_grid
from .imagecore import ImageGrid, read_boxes, read_pgm, write_pgm
from .losses import LossConfig
from .network import ModelConfig, SegmentationNet, load_weights
from .optim import AdamConfig
from .polar import PolarConfig, demo_config_for_box, polar_transform_region
from .smoothmax import SmoothMaxConfig
from .trainer import ARMS, TrainSettings, load_cases, train

VARIANT_FLAGS = {"weighted-softmax": "weighted_softmax", "weighted-quasimax": "weighted_quasimax"}


class UsageError(ValueError):
    """Bad flags, bad config keys, or malformed values."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


# schema: key -> (parser, default); None defaults mean "required" or "unset"
_COMMON_TRAIN_SCHEMA = {
    "data": (str, None),
    "out": (str, None),
    "seed": (int, 0),
    "epochs": (int, 50),
    "loss": (str, "combined"),
    "variant": (str, "weighted-softmax"),
    "alpha": (float, 4.0),
    "wmin": (float, 0.5),
    "margin": (str, "none"),
    "lambda": (float, 10.0),
    "beta": (float, 0.25),
    "gamma": (float, 2.0),
    "neighborhood": (str, "4"),
    "n_r": (int, 30),
    "n_theta": (int, 90),
    "radius": (float, 30.0),
    "lr": (float, 1e-4),
    "batch_size": (int, 16),
    "base_channels": (int, 8),
    "depth": (int, 2),
    "categories": (int, 1),
    "augment": (_parse_bool, True),
    "dedupe_pairwise": (_parse_bool, False),
    "box_kind": (str, "loose"),
}

_SCHEMAS = {
    "generate": {
        "out": (str, None),
        "seed": (int, 0),
        "image_size": (int, 64),
        "n_train": (int, 200),
        "n_val": (int, 50),
        "shape_family": (str, "ellipse"),
        "contrast_min": (float, 0.4),
        "contrast_max": (float, 0.6),
        "noise_level": (float, 0.03),
        "loose_margin": (int, 5),
    },
    "train": dict(_COMMON_TRAIN_SCHEMA),
    "eval": {
        "data": (str, None),
        "weights": (str, None),
        "out": (str, None),
        "manifest": (str, "val.txt"),
        "threshold": (float, 0.5),
        "base_channels": (int, 8),
        "depth": (int, 2),
        "categories": (int, 1),
        "box_kind": (str, "loose"),
    },
    "grid": dict(
        _COMMON_TRAIN_SCHEMA,
        alphas=(str, "0.5,1,2,4"),
        wmins=(str, "0.3,0.5,0.7"),
        seeds=(str, "0,1,2"),
    ),
    "dump-polar": {
        "data": (str, None),
        "case": (str, None),
        "out": (str, None),
        "box_kind": (str, "loose"),
        "n_theta": (int, 360),
    },
    "dump-origins": {
        "run": (str, None),
        "out": (str, None),
        "cases": (str, ""),
    },
}

_REQUIRED = {
    "generate": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "weights", "out"),
    "grid": ("data", "out"),
    "dump-polar": ("data", "case", "out"),
    "dump-origins": ("run", "out"),
}


def _resolve_config(command: str, args) -> dict:
    schema = _SCHEMAS[command]
    cfg = {k: default for k, (_, default) in schema.items()}

    def apply(key: str, raw: str, where: str):
        if key not in schema:
            raise UsageError(f"unknown config key {key!r} {where} (command {command})")
        parse = schema[key][0]
        try:
            cfg[key] = parse(raw)
        except UsageError:
            raise
        except ValueError:
            raise UsageError(f"bad value {raw!r} for key {key!r} {where}") from None

    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            apply(key.strip(), raw.strip(), f"in {path}:{lineno}")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        apply(key.strip(), raw.strip(), "on the command line")
    for key in schema:
        flag = key.replace("-", "_")
        value = getattr(args, flag, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k in _REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s) for {command}: {', '.join(missing)}")
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _parse_margin(raw) -> object:
    if isinstance(raw, int):
        return raw
    if str(raw).lower() in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"margin must be an integer or 'none', got {raw!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: dict) -> None:
    from .synthdata import SynthConfig, generate, split

    out = Path(cfg["out"])
    synth = SynthConfig(
        image_size=cfg["image_size"],
        n_train=cfg["n_train"],
        n_val=cfg["n_val"],
        shape_family=cfg["shape_family"],
        contrast_min=cfg["contrast_min"],
        contrast_max=cfg["contrast_max"],
        noise_level=cfg["noise_level"],
        loose_margin=cfg["loose_margin"],
        seed=cfg["seed"],
    )
    generate(synth, out)
    frac = synth.n_train / (synth.n_train + synth.n_val)
    split(out, seed=cfg["seed"], train_frac=frac)
    _echo_config(cfg, out)


def _train_configs(cfg: dict):
    if cfg["loss"] not in ARMS:
        raise UsageError(f"--loss must be one of {ARMS}, got {cfg['loss']!r}")
    variant = VARIANT_FLAGS.get(cfg["variant"])
    if variant is None:
        raise UsageError(f"--variant must be one of {tuple(VARIANT_FLAGS)}, got {cfg['variant']!r}")
    model_cfg = ModelConfig(
        in_channels=1,
        base_channels=cfg["base_channels"],
        depth=cfg["depth"],
        categories=cfg["categories"],
        seed=cfg["seed"],
    )
    adam_cfg = AdamConfig(learning_rate=cfg["lr"], batch_size=cfg["batch_size"])
    loss_cfg = LossConfig(
        lam=cfg["lambda"],
        beta=cfg["beta"],
        gamma=cfg["gamma"],
        smoothmax=SmoothMaxConfig(
            alpha=cfg["alpha"], w_min=cfg["wmin"], variant=variant, n_r=cfg["n_r"]
        ),
        neighborhood=cfg["neighborhood"],
        polar=PolarConfig(n_r=cfg["n_r"], n_theta=cfg["n_theta"], radius=cfg["radius"]),
    )
    settings = TrainSettings(
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        arm=cfg["loss"],
        dedupe_pairwise=cfg["dedupe_pairwise"],
        augment=cfg["augment"],
        box_kind=cfg["box_kind"],
        margin=_parse_margin(cfg["margin"]),
        out_dir=Path(cfg["out"]),
    )
    return model_cfg, adam_cfg, loss_cfg, settings


def cmd_train(cfg: dict) -> None:
    model_cfg, adam_cfg, loss_cfg, settings = _train_configs(cfg)
    _echo_config(cfg, Path(cfg["out"]))
    result = train(cfg["data"], model_cfg, adam_cfg, loss_cfg, settings)
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"epoch {last['epoch']}: loss {last['combined']:.4f}, "
            f"val dice {last['val_mean_dice']:.4f} (stacked {last['val_stacked_dice']:.4f})"
        )


def cmd_eval(cfg: dict) -> None:
    model_cfg = ModelConfig(
        in_channels=1,
        base_channels=cfg["base_channels"],
        depth=cfg["depth"],
        categories=cfg["categories"],
    )
    net = SegmentationNet(model_cfg)
    load_weights(net, cfg["weights"])
    cases = load_cases(cfg["data"], cfg["manifest"], cfg["box_kind"])
    ids, values, pairs = [], [], []
    for case in cases:
        probs = net.predict(case.image.values[None, None, :, :])
        pred = binarize(ImageGrid(np.clip(probs[0, 0], 0.0, 1.0)), cfg["threshold"])
        gt = case.masks.get(1)
        if gt is None:
            continue
        ids.append(case.case_id)
        values.append(dice(pred, gt))
        pairs.append((pred, gt))
    report = DiceReport(case_ids=tuple(ids), values=tuple(values))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "dice.csv").write_text(report.to_csv())
    stacked = dice_stacked(pairs) if pairs else float("nan")
    (out / "dice_stacked.txt").write_text(f"{stacked:.6f}\n")
    _echo_config(cfg, out)
    print(f"mean dice {report.mean:.4f} (std {report.std:.4f}), stacked {stacked:.6f}")


def cmd_grid(cfg: dict) -> None:
    alphas = [float(v) for v in str(cfg["alphas"]).split(",") if v]
    wmins = [float(v) for v in str(cfg["wmins"]).split(",") if v]
    seeds = [int(v) for v in str(cfg["seeds"]).split(",") if v]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for alpha in alphas:
        for wmin in wmins:
            dices = []
            for seed in seeds:
                run_cfg = dict(cfg, alpha=alpha, wmin=wmin, seed=seed)
                run_cfg["out"] = str(out / f"run_a{alpha:g}_w{wmin:g}_s{seed}")
                model_cfg, adam_cfg, loss_cfg, settings = _train_configs(run_cfg)
                _echo_config(run_cfg, Path(run_cfg["out"]))
                result = train(cfg["data"], model_cfg, adam_cfg, loss_cfg, settings)
                dices.append(result.final_stacked_dice)
            results[(alpha, wmin)] = float(np.mean(dices))
    (out / "sensitivity.csv").write_text(sensitivity_grid(results, alphas, wmins))
    _echo_config(cfg, out)


def cmd_dump_polar(cfg: dict) -> None:
    root = Path(cfg["data"])
    case_id = cfg["case"]
    image = read_pgm(root / "images" / f"{case_id}.pgm")
    box_dir = "boxes_loose" if cfg["box_kind"] == "loose" else "boxes_tight"
    boxes = read_boxes(root / box_dir / f"{case_id}.txt")
    if not boxes:
        raise ValueError(f"case {case_id} has no boxes")
    box = boxes[0]
    polar_cfg = demo_config_for_box(box, n_theta=cfg["n_theta"])
    origin = ((box.top + box.bottom) // 2, (box.left + box.right) // 2)
    region = polar_transform_region(image, box, origin, polar_cfg)

    from .polar import box_region_mask, nearest_sample

    mask_polar = nearest_sample(
        box_region_mask(box, image.height, image.width), origin, polar_cfg
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(ImageGrid(np.clip(region.values, 0.0, 1.0)), out / "polar_image.pgm")
    write_pgm(ImageGrid((mask_polar >= 0.5).astype(float)), out / "polar_boxmask.pgm")
    lines = [f"{j} {int(n)}" for j, n in enumerate(region.valid_len)]
    (out / "valid_len.txt").write_text("\n".join(lines) + "\n")
    _echo_config(cfg, out)


def cmd_dump_origins(cfg: dict) -> None:
    run_dir = Path(cfg["run"])
    origins_path = run_dir / "origins.csv"
    if not origins_path.exists():
        raise ValueError(f"{origins_path} not found; was this directory produced by 'train'?")
    wanted = {c for c in str(cfg["cases"]).split(",") if c}
    lines = origins_path.read_text().splitlines()
    kept = [lines[0]]
    for line in lines[1:]:
        box_id = line.split(",")[1]
        if not wanted or box_id.split(":")[0] in wanted:
            kept.append(line)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "origins.csv").write_text("\n".join(kept) + "\n")
    _echo_config(cfg, out)


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "dump-polar": cmd_dump_polar,
    "dump-origins": cmd_dump_origins,
}

_FLAG_HELP = {
    "loss": "loss arm: polar | baseline-lg | combined",
    "variant": "smooth max: weighted-softmax | weighted-quasimax",
    "margin": "re-derive loose boxes from tight ones with this margin",
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="polarmil", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for command, schema in _SCHEMAS.items():
        p = sub.add_parser(command, add_help=True)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        for key, (parse, _) in schema.items():
            if parse is _parse_bool:
                p.add_argument(f"--{key.replace('_', '-')}", type=_parse_bool, default=None,
                               metavar="BOOL", help=_FLAG_HELP.get(key, ""))
            else:
                p.add_argument(f"--{key.replace('_', '-')}", type=parse, default=None,
                               help=_FLAG_HELP.get(key, ""))
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError(parser.format_usage())
        cfg = _resolve_config(args.command, args)
        _COMMANDS[args.command](cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
