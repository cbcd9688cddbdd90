"""Command line interface: train, infer, evaluate, augment, inspect.

Configuration is a flat ``key = value`` text file; command line flags
override file values.  Errors exit nonzero with one machine-parseable
``ERROR <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

from .augment import DeformParams, NoiseParams, augment_pair
from .errors import ConfigError, VoxsegError
from .losses import LossConfig, LossKind
from .metrics import evaluate
from .network import NetworkConfig, build_network, count_parameters
from .trainer import TrainConfig, infer, train
from .volumes import LabelVolume, Volume, load_volume, save_volume


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; blanks ignored."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _get(cfg: dict, key, cast, default):
    if key not in cfg:
        return default
    raw = cfg[key]
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}: {exc}") from exc


def _int_tuple(raw: str):
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _bool(raw: str):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def network_config_from(cfg: dict) -> NetworkConfig:
    return NetworkConfig(
        num_classes=_get(cfg, "num_classes", int, 55),
        in_channels=_get(cfg, "in_channels", int, 1),
        stem_channels=_get(cfg, "stem_channels", int, 32),
        bottleneck_mid_channels=_get(cfg, "bottleneck_mid_channels", int, 16),
        bottleneck_expansion=_get(cfg, "bottleneck_expansion", int, 4),
        branch_channels=_get(cfg, "branch_channels", _int_tuple, (16, 32, 64)),
        stage_modules=_get(cfg, "stage_modules", _int_tuple, (1, 2)),
        blocks_per_module=_get(cfg, "blocks_per_module", int, 3),
        norm_eps=_get(cfg, "norm_eps", float, 1e-5),
        norm_momentum=_get(cfg, "norm_momentum", float, 0.1),
    )


def deform_params_from(cfg: dict) -> DeformParams:
    return DeformParams(
        sigma_range=(
            _get(cfg, "elastic.sigma_low", float, 0.04),
            _get(cfg, "elastic.sigma_high", float, 0.06),
        ),
        alpha=_get(cfg, "elastic.alpha", float, 8.0),
        sigma_in_voxels=_get(cfg, "elastic.sigma_in_voxels", _bool, False),
        oob_mode=_get(cfg, "elastic.oob_mode", str, "background"),
    )


def noise_params_from(cfg: dict) -> NoiseParams:
    return NoiseParams(
        sigma_range=(
            _get(cfg, "noise.sigma_low", float, 0.0),
            _get(cfg, "noise.sigma_high", float, 0.1),
        )
    )


def _read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(
                    f"{path}:{lineno}: manifest lines are '<volume> <labels>'"
                )
            pairs.append(
                tuple(
                    p if os.path.isabs(p) else os.path.join(base, p) for p in parts
                )
            )
    if not pairs:
        raise ConfigError(f"{path}: manifest is empty")
    return tuple(pairs)


def train_config_from(cfg: dict, args) -> TrainConfig:
    manifest_path = cfg.get("manifest")
    if args.data_dir:
        candidate = os.path.join(args.data_dir, "manifest.txt")
        if manifest_path is None and os.path.exists(candidate):
            manifest_path = candidate
    if manifest_path is None:
        raise ConfigError(
            "no training data: set 'manifest' in the config or pass --data-dir "
            "containing manifest.txt"
        )
    loss_kind = args.loss or cfg.get("loss", "ce")
    return TrainConfig(
        network=network_config_from(cfg),
        steps=args.steps if args.steps is not None else _get(cfg, "steps", int, 30000),
        precision=args.precision or cfg.get("precision", "o1"),
        loss=LossConfig(
            kind=LossKind(loss_kind),
            dice_epsilon=_get(cfg, "dice_epsilon", float, 1e-4),
            log_floor=_get(cfg, "log_floor", float, 1e-12),
        ),
        deform=deform_params_from(cfg),
        noise=noise_params_from(cfg),
        seed=args.seed if args.seed is not None else _get(cfg, "seed", int, 0),
        checkpoint_every=_get(cfg, "checkpoint_every", int, 1000),
        manifest=_read_manifest(manifest_path),
        fold=args.fold if args.fold is not None else _get(cfg, "fold", int, None),
        num_folds=_get(cfg, "num_folds", int, 4),
        out_dir=args.out_dir or cfg.get("out_dir", "."),
        lr=_get(cfg, "lr", float, 1e-3),
        beta1=_get(cfg, "beta1", float, 0.9),
        beta2=_get(cfg, "beta2", float, 0.999),
        opt_eps=_get(cfg, "opt_eps", float, 1e-8),
        init_scale=_get(cfg, "scale.init", float, 2.0**16),
        growth_interval=_get(cfg, "scale.growth_interval", int, 2000),
        growth_factor=_get(cfg, "scale.growth_factor", float, 2.0),
        backoff_factor=_get(cfg, "scale.backoff_factor", float, 0.5),
        patience=args.patience
        if args.patience is not None
        else _get(cfg, "patience", int, None),
        divergence_window=_get(cfg, "divergence_window", int, 100),
    )


def _cmd_train(args):
    cfg = parse_config_file(args.config) if args.config else {}
    result = train(train_config_from(cfg, args))
    for line in result.log_lines[-5:]:
        print(line)
    if result.diverged:
        print(result.divergence_report, file=sys.stderr)
        return 3
    if result.checkpoint_path:
        print(f"checkpoint {result.checkpoint_path}")
    return 0


def _cmd_infer(args):
    volume = load_volume(args.volume)
    if not isinstance(volume, Volume):
        raise ConfigError(f"{args.volume}: expected an intensity volume")
    labels = infer(args.checkpoint, volume)
    save_volume(labels, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args):
    truth = load_volume(args.truth)
    pred = load_volume(args.pred)
    if not isinstance(truth, LabelVolume) or not isinstance(pred, LabelVolume):
        raise ConfigError("evaluate needs two label volumes")
    num_classes = args.classes or max(truth.num_classes, pred.num_classes)
    report = evaluate(truth, pred, num_classes)
    for line in report.lines():
        print(line)
    return 0


def _cmd_augment(args):
    cfg = parse_config_file(args.config) if args.config else {}
    volume = load_volume(args.volume)
    labels = load_volume(args.labels)
    if not isinstance(volume, Volume) or not isinstance(labels, LabelVolume):
        raise ConfigError("augment needs an intensity volume and a label volume")
    out_vol, out_lab = augment_pair(
        volume, labels, deform_params_from(cfg), noise_params_from(cfg), args.seed
    )
    save_volume(out_vol, args.out_volume)
    save_volume(out_lab, args.out_labels)
    print(f"wrote {args.out_volume} and {args.out_labels}")
    return 0


def _cmd_inspect(args):
    cfg = parse_config_file(args.config) if args.config else {}
    net = build_network(network_config_from(cfg), seed=0)
    for name, scales, channels in net.describe():
        scale_txt = " ".join(scales)
        chan_txt = " ".join(str(c) for c in channels)
        print(f"{name:-28s} scale {scale_txt:-18s} channels {chan_txt}")
    print(f"total_params {count_parameters(net)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxseg", description="Full-volume 3-D brain segmentation engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", help="flat key = value config file")
    p_train.add_argument("--data-dir", help="directory containing manifest.txt")
    p_train.add_argument("--out-dir", help="checkpoint and log directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--precision", choices=["o0", "o1", "o2", "o3"])
    p_train.add_argument("--loss", choices=["ce", "dice", "combined"])
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--fold", type=int)
    p_train.add_argument("--patience", type=int)
    p_train.set_defaults(func=_cmd_train)

    p_infer = sub.add_parser("infer", help="segment one volume")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--volume", required=True)
    p_infer.add_argument("--out", required=True)
    p_infer.set_defaults(func=_cmd_infer)

    p_eval = sub.add_parser("evaluate", help="score a prediction against truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--classes", type=int)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_aug = sub.add_parser("augment", help="apply elastic deformation and noise")
    p_aug.add_argument("--volume", required=True)
    p_aug.add_argument("--labels", required=True)
    p_aug.add_argument("--out-volume", required=True)
    p_aug.add_argument("--out-labels", required=True)
    p_aug.add_argument("--seed", type=int, default=0)
    p_aug.add_argument("--config")
    p_aug.set_defaults(func=_cmd_augment)

    p_ins = sub.add_parser("inspect", help="print the layer listing and size")
    p_ins.add_argument("--config")
    p_ins.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VoxsegError, OSError, ValueError) as exc:
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
