"""Batch command-line interface.

Subcommands: gen-data, pretrain, finetune, eval, mask-viz, sweep, grad-check.
Configuration is resolved as defaults <- config file <- flags, later sources
winning, and the fully resolved set is echoed into every output directory as
``resolved-config.txt``. Config files are line-oriented ``key = value`` with
``#`` comments; unknown keys are fatal. Exit codes: 0 success, 1 usage or
configuration error, 2 runtime (data/training) error.

Outputs are deterministic given identical argv and input files; wall-clock
timing is logged to stderr only.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (collect_arrays, load_checkpoint, model_config,
                         params_from_checkpoint, save_checkpoint)
from .data import (SyntheticSpec, generate_synthetic, load_manifest,
                   load_sample, load_split, write_pgm)
from .errors import ConfigError, RegionMimError
from .gradcheck import composed_gradient_errors
from .model import DecoderConfig, EncoderConfig
from .patching import (RANDOM, REGION, build_masking_plan, compute_valid_set,
                       reassemble_image, split_into_patches)
from .training import (RunConfig, evaluate, finetune, pretrain,
                       sweep_masking_ratio, write_metrics_csv, write_sweep_csv)

SWEEP_RATIOS = "0.15,0.30,0.45,0.60,0.75,0.90"


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# canonical configuration keys: name -> (parser, default)
CONFIG_KEYS: dict[str, tuple] = {
    "pretrain_epochs": (int, 40),
    "finetune_epochs": (int, 30),
    "batch_size": (int, 256),
    "base_lr": (float, 1.5e-4),
    "weight_decay": (float, 0.05),
    "beta1": (float, 0.9),
    "beta2": (float, 0.95),
    "adam_eps": (float, 1e-8),
    "schedule": (str, "constant"),
    "warmup_epochs": (int, 0),
    "mask_ratio": (float, 0.75),
    "mask_strategy": (str, REGION),
    "overlap_threshold": (float, 0.0),
    "image_size": (int, 224),
    "patch_size": (int, 16),
    "channels": (int, 1),
    "blocks": (int, 12),
    "latent_dim": (int, 768),
    "heads": (int, 12),
    "mlp_dim": (int, 3072),
    "dec_blocks": (int, 8),
    "dec_latent_dim": (int, 512),
    "dec_heads": (int, 16),
    "dec_mlp_dim": (int, 2048),
    "seed": (int, 0),
    "label_fraction": (float, 1.0),
    "freeze_encoder": (_bool, False),
    "per_class": (int, 25),
    "sweep_ratios": (str, SWEEP_RATIOS),
    "sweep_strategies": (str, f"{REGION},{RANDOM}"),
}

# flag destination -> config key
FLAG_KEYS = {
    "seed": "seed",
    "mask_strategy": "mask_strategy",
    "mask_ratio": "mask_ratio",
    "patch_size": "patch_size",
    "batch": "batch_size",
    "lr": "base_lr",
    "label_fraction": "label_fraction",
    "freeze_encoder": "freeze_encoder",
    "image_size": "image_size",
    "per_class": "per_class",
    "ratios": "sweep_ratios",
    "strategies": "sweep_strategies",
    "sample_index": None,  # not a config key
}


def default_config() -> dict:
    return {key: default for key, (_, default) in CONFIG_KEYS.items()}


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values: dict = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{line_no}: unknown configuration key {key!r}")
        parser = CONFIG_KEYS[key][0]
        try:
            values[key] = parser(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{line_no}: bad value for {key}: {value!r}") from exc
    return values


def resolve_config(args: argparse.Namespace, phase_epochs: str | None = None) -> dict:
    """defaults <- config file <- flags; `phase_epochs` names the key --epochs sets."""
    config = default_config()
    if getattr(args, "config", None):
        config.update(parse_config_file(args.config))
    for dest, key in FLAG_KEYS.items():
        if key is None:
            continue
        value = getattr(args, dest, None)
        if value is not None:
            config[key] = value
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        if phase_epochs is None:
            config["pretrain_epochs"] = epochs
            config["finetune_epochs"] = epochs
        else:
            config[phase_epochs] = epochs
    if config["mask_strategy"] not in (REGION, RANDOM):
        raise ConfigError(f"mask_strategy must be {REGION} or {RANDOM}, "
                          f"got {config['mask_strategy']!r}")
    if config["image_size"] % config["patch_size"]:
        raise ConfigError(f"patch_size {config['patch_size']} does not divide "
                          f"image_size {config['image_size']}")
    return config


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_resolved_config(out_dir: Path, command: str, config: dict, extra: dict) -> None:
    lines = [f"command = {command}"]
    for key in sorted(config):
        lines.append(f"{key} = {_format_value(config[key])}")
    for key in sorted(extra):
        lines.append(f"{key} = {_format_value(extra[key])}")
    (out_dir / "resolved-config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_configs(config: dict) -> tuple[EncoderConfig, DecoderConfig]:
    tokens_per_side = config["image_size"] // config["patch_size"]
    encoder = EncoderConfig(
        blocks=config["blocks"],
        latent_dim=config["latent_dim"],
        heads=config["heads"],
        mlp_dim=config["mlp_dim"],
        patch_size=config["patch_size"],
        channels=config["channels"],
        max_tokens=tokens_per_side * tokens_per_side,
    )
    decoder = DecoderConfig(
        blocks=config["dec_blocks"],
        latent_dim=config["dec_latent_dim"],
        heads=config["dec_heads"],
        mlp_dim=config["dec_mlp_dim"],
    )
    return encoder, decoder


def _run_config(config: dict, epochs_key: str) -> RunConfig:
    return RunConfig(
        epochs=config[epochs_key],
        batch_size=config["batch_size"],
        base_lr=config["base_lr"],
        weight_decay=config["weight_decay"],
        beta1=config["beta1"],
        beta2=config["beta2"],
        adam_eps=config["adam_eps"],
        mask_ratio=config["mask_ratio"],
        mask_strategy=config["mask_strategy"],
        overlap_threshold=config["overlap_threshold"],
        schedule=config["schedule"],
        warmup_epochs=config["warmup_epochs"],
        seed=config["seed"],
    )


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _require(args, name: str):
    value = getattr(args, name, None)
    if not value:
        raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
    return value


def _prepare_out(args, command: str, config: dict, extra: dict) -> Path:
    out_dir = Path(_require(args, "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out_dir, command, config, extra)
    return out_dir


def _load_train(args, config: dict):
    manifest = load_manifest(_require(args, "manifest"))
    size = config["image_size"]
    return manifest, load_split(manifest, "train", size, size)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    out_dir = _prepare_out(args, "gen-data", config, {})
    spec = SyntheticSpec(image_size=config["image_size"],
                         per_class=config["per_class"], seed=config["seed"])
    manifest_path = generate_synthetic(spec, out_dir)
    print(manifest_path)
    return 0


def cmd_pretrain(args) -> int:
    config = resolve_config(args, phase_epochs="pretrain_epochs")
    extra = {"manifest": str(_require(args, "manifest"))}
    out_dir = _prepare_out(args, "pretrain", config, extra)
    _, train = _load_train(args, config)
    encoder_cfg, decoder_cfg = _model_configs(config)
    run = _run_config(config, "pretrain_epochs")
    encoder, decoder, metrics = pretrain(
        [(img, mask) for img, mask, _ in train], encoder_cfg, decoder_cfg, run, log=_log)
    save_checkpoint(out_dir / "checkpoint.rgmm",
                    model_config(encoder_cfg, decoder_cfg),
                    collect_arrays(encoder, decoder))
    write_metrics_csv(out_dir / "metrics.csv", metrics)
    print(out_dir / "checkpoint.rgmm")
    return 0


def cmd_finetune(args) -> int:
    config = resolve_config(args, phase_epochs="finetune_epochs")
    extra = {"manifest": str(_require(args, "manifest")),
             "checkpoint": str(args.checkpoint or "")}
    out_dir = _prepare_out(args, "finetune", config, extra)
    manifest, train = _load_train(args, config)
    run = _run_config(config, "finetune_epochs")

    if args.checkpoint:
        encoder, _, _ = params_from_checkpoint(load_checkpoint(args.checkpoint))
        encoder_cfg = encoder.config
    else:
        encoder_cfg, decoder_cfg = _model_configs(config)
        from .model import init_parameters  # fresh weights: training from scratch
        encoder, _, _ = init_parameters(encoder_cfg, decoder_cfg, manifest.classes, run.seed)

    labeled = [(img, label) for img, _, label in train]
    encoder, head, metrics = finetune(
        labeled, encoder, run, manifest.classes,
        label_fraction=config["label_fraction"],
        freeze_encoder=config["freeze_encoder"], log=_log)
    save_checkpoint(out_dir / "checkpoint.rgmm",
                    model_config(encoder_cfg, classes=manifest.classes),
                    collect_arrays(encoder, head))
    write_metrics_csv(out_dir / "metrics.csv", metrics)
    print(out_dir / "checkpoint.rgmm")
    return 0


def cmd_eval(args) -> int:
    config = resolve_config(args)
    checkpoint_path = _require(args, "checkpoint")
    extra = {"manifest": str(_require(args, "manifest")),
             "checkpoint": str(checkpoint_path)}
    out_dir = _prepare_out(args, "eval", config, extra)
    encoder, _, head = params_from_checkpoint(load_checkpoint(checkpoint_path))
    if head is None:
        raise ConfigError(f"checkpoint {checkpoint_path} carries no classifier head")
    manifest = load_manifest(args.manifest)
    size = config["image_size"]
    test = load_split(manifest, "test", size, size)
    accuracy, confusion = evaluate([(img, label) for img, _, label in test], encoder, head)
    (out_dir / "eval.txt").write_text(f"accuracy = {accuracy:.6f}\n", encoding="utf-8")
    lines = [",".join(str(v) for v in row) for row in confusion]
    (out_dir / "confusion.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"accuracy = {accuracy:.6f}")
    return 0


def cmd_mask_viz(args) -> int:
    config = resolve_config(args)
    extra = {"manifest": str(_require(args, "manifest")),
             "sample_index": args.sample_index or 0}
    out_dir = _prepare_out(args, "mask-viz", config, extra)
    manifest = load_manifest(args.manifest)
    index = args.sample_index or 0
    if not 0 <= index < len(manifest.records):
        raise ConfigError(f"sample index {index} outside the manifest's "
                          f"{len(manifest.records)} rows")
    size = config["image_size"]
    img, mask = load_sample(manifest.records[index], size, size)

    pg = split_into_patches(img, config["patch_size"])
    valid = compute_valid_set(mask, config["patch_size"], config["overlap_threshold"])
    plan = build_masking_plan(pg.count, valid, config["mask_ratio"],
                              config["mask_strategy"], config["seed"])
    gray = np.full(pg.patches.shape[1], 0.5)
    masked_img = reassemble_image(pg, {int(i): gray for i in plan.masked})

    def to_u8(values):
        return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)

    write_pgm(out_dir / "original.pgm", to_u8(img.pixels[:, :, 0]))
    overlay = 0.55 * img.pixels[:, :, 0] + 0.45 * mask.bits
    write_pgm(out_dir / "overlay.pgm", to_u8(overlay))
    write_pgm(out_dir / "masked.pgm", to_u8(masked_img.pixels[:, :, 0]))
    _log(f"{plan.masked.size} of {pg.count} patches masked"
         + (" (clamped)" if plan.clamped else ""))
    print(out_dir)
    return 0


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    extra = {"manifest": str(_require(args, "manifest"))}
    out_dir = _prepare_out(args, "sweep", config, extra)
    manifest, train = _load_train(args, config)
    size = config["image_size"]
    test = load_split(manifest, "test", size, size)
    try:
        ratios = [float(r) for r in config["sweep_ratios"].split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sweep_ratios {config['sweep_ratios']!r}") from exc
    strategies = [s.strip() for s in config["sweep_strategies"].split(",") if s.strip()]
    for strategy in strategies:
        if strategy not in (REGION, RANDOM):
            raise ConfigError(f"unknown sweep strategy {strategy!r}")
    encoder_cfg, decoder_cfg = _model_configs(config)
    rows = sweep_masking_ratio(
        [(img, mask) for img, mask, _ in train],
        [(img, label) for img, _, label in train],
        [(img, label) for img, _, label in test],
        encoder_cfg, decoder_cfg,
        _run_config(config, "pretrain_epochs"),
        _run_config(config, "finetune_epochs"),
        manifest.classes, ratios, strategies,
        label_fraction=config["label_fraction"], log=_log)
    write_sweep_csv(out_dir / "sweep.csv", rows)
    print(out_dir / "sweep.csv")
    return 0


def cmd_grad_check(args) -> int:
    config = resolve_config(args)
    if getattr(args, "out", None):
        _prepare_out(args, "grad-check", config, {})
    errors = composed_gradient_errors(config["seed"])
    worst = max(errors.values())
    for path, value in errors.items():
        print(f"{path} max relative error: {value:.3e}")
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, *, data: bool = False,
                training: bool = False, masking: bool = False) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="run seed (PCG64 streams derive from it)")
    if data:
        parser.add_argument("--manifest", help="dataset manifest CSV")
        parser.add_argument("--image-size", dest="image_size", type=int,
                            help="resize target (square)")
    if masking:
        parser.add_argument("--mask-strategy", dest="mask_strategy",
                            choices=(REGION, RANDOM), help="masking strategy")
        parser.add_argument("--mask-ratio", dest="mask_ratio", type=float,
                            help="fraction of patches to mask")
        parser.add_argument("--patch-size", dest="patch_size", type=int,
                            help="square patch side in pixels")
    if training:
        parser.add_argument("--epochs", type=int, help="epochs for this phase")
        parser.add_argument("--batch", type=int, help="batch size")
        parser.add_argument("--lr", type=float, help="base learning rate (at batch 256)")
        parser.add_argument("--label-fraction", dest="label_fraction", type=float,
                            help="stratified fraction of labels to train on")
        parser.add_argument("--freeze-encoder", dest="freeze_encoder",
                            action="store_true", default=None,
                            help="train only the classifier head")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionmim",
        description="Region-guided masked image modeling: pretraining, "
                    "fine-tuning, and evaluation on organ-masked images.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="write the synthetic corpus")
    _add_common(p, data=True)
    p.add_argument("--per-class", dest="per_class", type=int, help="samples per class")

    p = commands.add_parser("pretrain", help="masked-reconstruction pretraining")
    _add_common(p, data=True, training=True, masking=True)

    p = commands.add_parser("finetune", help="supervised fine-tuning")
    _add_common(p, data=True, training=True, masking=True)
    p.add_argument("--checkpoint", help="pretraining checkpoint to start from")

    p = commands.add_parser("eval", help="accuracy and confusion on the test split")
    _add_common(p, data=True)
    p.add_argument("--checkpoint", help="fine-tuned checkpoint to evaluate")

    p = commands.add_parser("mask-viz", help="render original/overlay/masked images")
    _add_common(p, data=True, masking=True)
    p.add_argument("--sample-index", dest="sample_index", type=int,
                   help="manifest row to render (default 0)")

    p = commands.add_parser("sweep", help="masking-ratio sweep grid")
    _add_common(p, data=True, training=True, masking=True)
    p.add_argument("--ratios", help="comma-separated masking ratios")
    p.add_argument("--strategies", help="comma-separated strategies")

    p = commands.add_parser("grad-check", help="finite-difference check on a tiny model")
    _add_common(p)
    return parser


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "mask-viz": cmd_mask_viz,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return 0 if exc.code in (0, None) else 1
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RegionMimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
