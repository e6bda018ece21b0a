"""Command-line entry point: ``debug-osdg <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import commands
from .content import make_mask_provider
from .core import ConfigError, DebugError, RunSettings, TrainConfig, read_config_file, split_config
from .data import DEFAULT_DOMAINS, KNOWN_SHAPES, UNKNOWN_SHAPES, SyntheticSpec, generate_synthetic, load_manifest, save_dataset
from .evaluation import write_jsonl
from .trainer import DEFAULT_GRID, VARIANTS, AblationSwitches, load_checkpoint

log = logging.getLogger("debug_osdg")


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value) if value.strip() else ""
    return out


def resolve_config(args: argparse.Namespace) -> tuple[RunSettings, TrainConfig]:
    """Config file values, then ``--set`` pairs, then dedicated flags."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    values.update(_parse_overrides(getattr(args, "set", None) or []))
    for key in ("seed", "epochs", "out_dir", "data_root", "source_domain"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return split_config(values)


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    names = {d.name: d for d in DEFAULT_DOMAINS}
    wanted = _csv(args.domains) if args.domains else list(names)
    missing = [d for d in wanted if d not in names]
    if missing:
        raise ConfigError(f"unknown synthetic domain(s) {missing}; choose from {list(names)}")
    domains = tuple(names[d] for d in wanted)
    spec = SyntheticSpec(
        known_classes=tuple(_csv(args.known)),
        unknown_classes=tuple(_csv(args.unknown)),
        domains=domains,
        samples_per_class_per_domain=args.per_class,
        image_size=args.image_size,
        seed=args.seed,
    )
    records = generate_synthetic(spec)
    root = save_dataset(records, args.out, spec.known_classes)
    commands.write_resolved_config(root / "config.json", synthetic=spec)
    print(f"wrote {len(records)} samples to {root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    settings, cfg = resolve_config(args)
    switches = AblationSwitches.without(_csv(args.ablate or ""))
    result = commands.train_command(settings, cfg, switches)
    print(f"trained {len(result.log)} steps; checkpoint {result.final_path}")
    metrics = Path(settings.out_dir) / "metrics.jsonl"
    if metrics.is_file():
        print(metrics.read_text().strip())
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, src, targets = load_manifest(args.data_root, args.source_domain, _csv(args.domains) if args.domains else None)
    if args.include_source:
        targets = {f"{args.source_domain}": src, **targets}
    out = Path(args.out_dir)
    commands.write_resolved_config(
        out / "config.json",
        eval={"checkpoint": str(args.checkpoint), "data_root": args.data_root, "domains": list(targets)},
        train=ckpt.config,
    )
    _, rows = commands.evaluate_targets(ckpt, targets, out)
    write_jsonl(out / "metrics.jsonl", rows)
    print(commands.format_table([{"variant": r["domain"], "seed": "", **r} for r in rows]))
    return 0


def cmd_preview_aug(args: argparse.Namespace) -> int:
    settings, _ = resolve_config(args)
    ls, src, targets = commands.load_run_data(settings)
    domain = args.domain or settings.source_domain
    records = src if domain == settings.source_domain else targets.get(domain)
    if records is None:
        raise ConfigError(f"domain {domain!r} not among {[settings.source_domain, *targets]}")
    kind = args.mask_provider or settings.mask_provider
    provider = make_mask_provider("oracle" if kind in ("sidecar", "sidecar_files") else kind, settings.data_root)
    out = Path(settings.out_dir)
    commands.write_resolved_config(out / "config.json", run=replace(settings, mask_provider=kind), preview={"n": args.n, "domain": domain})
    paths = commands.preview_aug(records, provider, out, args.n, commands.edge_operator_for(settings))
    print(f"wrote {len(paths)} triptych(s) to {out}")
    return 0


def cmd_export_features(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, src, targets = load_manifest(args.data_root, args.source_domain, _csv(args.domains) if args.domains else None)
    records = list(src) + [r for rr in targets.values() for r in rr]
    out = commands.export_features(ckpt, records, args.out)
    commands.write_resolved_config(
        out.with_suffix(".config.json"),
        export={"checkpoint": str(args.checkpoint), "data_root": args.data_root, "domains": [args.source_domain, *targets]},
        train=ckpt.config,
    )
    print(f"wrote {len(records)} rows to {out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    settings, cfg = resolve_config(args)
    ls, src, targets = commands.load_run_data(settings)
    if not targets:
        raise ConfigError("ablate needs at least one target domain")
    variants = _csv(args.variants) if args.variants else list(DEFAULT_GRID)
    seeds = [int(s) for s in _csv(args.seeds)]
    out = Path(settings.out_dir)
    commands.write_resolved_config(out / "config.json", run=settings, train=cfg, grid={"variants": variants, "seeds": seeds})
    _, table = commands.run_ablation(
        src, targets, ls, cfg, variants, seeds, commands.provider_for(settings), commands.edge_operator_for(settings), out, args.jobs
    )
    print(commands.format_table(table))
    return 0


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat YAML file of run and training keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--source-domain", dest="source_domain")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debug-osdg", description="Open-set single-source domain generalization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render the synthetic multi-domain open-set benchmark")
    p.add_argument("--out", required=True, type=Path, help="dataset root to create")
    p.add_argument("--per-class", type=int, default=25, help="samples per class per domain")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--known", default=",".join(KNOWN_SHAPES))
    p.add_argument("--unknown", default=",".join(UNKNOWN_SHAPES))
    p.add_argument("--domains", help=f"subset of {','.join(d.name for d in DEFAULT_DOMAINS)}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train one model on the source domain")
    _add_config_args(p)
    p.add_argument("--ablate", help="components to switch off: bs,gpsa,kd,eova,ova")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="open-set evaluation of a checkpoint on target domains")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data-root", required=True)
    p.add_argument("--source-domain", required=True)
    p.add_argument("--domains", help="target domains (default: all but the source)")
    p.add_argument("--include-source", action="store_true", help="also score the source domain (known classes only)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preview-aug", help="write original / masked / edge triptychs")
    _add_config_args(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--domain", help="domain to preview (default: source)")
    p.add_argument("--mask-provider", choices=["oracle", "sidecar_files", "all_foreground"])
    p.set_defaults(func=cmd_preview_aug)

    p = sub.add_parser("export-features", help="dump pooled encoder features to CSV")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data-root", required=True)
    p.add_argument("--source-domain", required=True)
    p.add_argument("--domains", help="extra domains to include (default: all)")
    p.add_argument("--out", required=True, type=Path, help="CSV path")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    _add_config_args(p)
    p.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)} (default: {','.join(DEFAULT_GRID)})")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1, help="grid entries to train in parallel")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DebugError as exc:
        print(f"debug-osdg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
