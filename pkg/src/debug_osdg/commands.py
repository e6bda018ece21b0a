"""Pipeline entry points shared by the CLI and the test harness."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .content import EdgeOperator, MaskProvider, apply_mask, extract_edges, gradient_magnitude, make_mask_provider
from .core import ConfigError, DataError, LabelSpace, RunSettings, SampleRecord, TrainConfig, validate_config
from .data import load_manifest, stratified_split, to_uint8
from .evaluation import Metrics, evaluate_domain, predict_features, summarize, write_jsonl
from .trainer import DEFAULT_GRID, VARIANTS, AblationSwitches, Checkpoint, TrainResult, channel_stats, run_training

log = logging.getLogger(__name__)


def write_resolved_config(path: str | Path, **sections: Any) -> Path:
    """Dump the fully resolved configuration of a command as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {}
    for name, value in sections.items():
        if hasattr(value, "to_dict"):
            value = value.to_dict()
        elif hasattr(value, "__dataclass_fields__"):
            value = asdict(value)
        payload[name] = value
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def edge_operator_for(settings: RunSettings) -> EdgeOperator:
    if settings.edge_source == "external_files":
        return EdgeOperator("external_files", root=settings.data_root)
    return EdgeOperator(settings.edge_source)


def load_run_data(settings: RunSettings) -> tuple[LabelSpace, list[SampleRecord], dict[str, list[SampleRecord]]]:
    if not settings.data_root or not settings.source_domain:
        raise ConfigError("data_root and source_domain are required")
    need_masks = settings.mask_provider in ("oracle", "sidecar", "sidecar_files")
    ls, src, targets = load_manifest(settings.data_root, settings.source_domain, settings.target_domains or None, need_masks)
    if settings.known_classes and tuple(settings.known_classes) != ls.known_classes:
        raise ConfigError(f"known_classes {list(settings.known_classes)} != dataset list {list(ls.known_classes)}")
    return ls, src, targets


def provider_for(settings: RunSettings) -> MaskProvider:
    # saved datasets carry their masks as sidecars, which the loader attaches to each record
    kind = "oracle" if settings.mask_provider in ("sidecar", "sidecar_files") else settings.mask_provider
    return make_mask_provider(kind, settings.data_root)


def evaluate_targets(
    ckpt: Checkpoint, targets: Mapping[str, Sequence[SampleRecord]], dump_dir: Optional[str | Path] = None
) -> tuple[dict[str, Metrics], list[dict]]:
    per_domain = {}
    for name, records in targets.items():
        dump = Path(dump_dir) / f"predictions_{name}.jsonl" if dump_dir is not None else None
        per_domain[name], _ = evaluate_domain(ckpt, records, dump)
    return per_domain, summarize(per_domain)


def train_command(settings: RunSettings, cfg: TrainConfig, switches: AblationSwitches) -> TrainResult:
    cfg = validate_config(cfg)
    out = Path(settings.out_dir)
    write_resolved_config(out / "config.json", run=settings, train=cfg, switches=switches)
    ls, src, targets = load_run_data(settings)
    train, val = stratified_split(src, cfg.val_fraction, cfg.seed)
    result = run_training(train, ls, cfg, switches, val, provider_for(settings), edge_operator_for(settings), out)
    if targets:
        _, rows = evaluate_targets(result.checkpoint, targets, out)
        write_jsonl(out / "metrics.jsonl", rows)
    return result


# ---- preview-aug -------------------------------------------------------------


def preview_aug(
    records: Sequence[SampleRecord],
    provider: MaskProvider,
    out_dir: str | Path,
    n: int,
    edge_op: EdgeOperator = EdgeOperator(),
    fill: Optional[torch.Tensor] = None,
) -> list[Path]:
    """Write ``n`` original | masked | edge triptychs, one PNG per sample."""
    if n > len(records):
        log.warning("asked for %d previews but only %d samples exist; writing %d", n, len(records), len(records))
        n = len(records)
    if fill is None:
        fill = channel_stats(torch.stack([r.image for r in records]))[0] if records else torch.zeros(3)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, r in enumerate(records[:n]):
        masked = apply_mask(r.image, provider.mask_for(r), fill)
        if edge_op.kind == "gradient_magnitude":
            edge = gradient_magnitude(r.image, edge_op.blur_radius, edge_op.normalize)
        else:
            edge = extract_edges(r, edge_op).edge
        panels = [to_uint8(p.permute(1, 2, 0).numpy()) for p in (r.image, masked, edge)]
        p = out / f"triptych_{i:04d}.png"
        Image.fromarray(np.concatenate(panels, axis=1)).save(p)
        paths.append(p)
    return paths


# ---- export-features ---------------------------------------------------------


def export_features(ckpt: Checkpoint, records: Sequence[SampleRecord], path: str | Path) -> Path:
    """CSV with columns id, domain, label, f0 .. f{C'-1}."""
    if not records:
        raise DataError("nothing to export")
    feats = predict_features(ckpt, torch.stack([r.image for r in records]))
    ls = ckpt.label_space
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "domain", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for r, f in zip(records, feats.tolist()):
            label = ls.index(r.class_name) if r.class_name else r.label
            w.writerow([r.sample_id, r.domain, label] + [repr(v) for v in f])
    return path


# ---- ablate ------------------------------------------------------------------


@dataclass
class AblationRun:
    variant: str
    seed: int
    metrics: dict[str, Optional[float]]  # averaged over target domains
    per_domain: list[dict]


def _run_one(
    variant: str,
    seed: int,
    src: Sequence[SampleRecord],
    targets: Mapping[str, Sequence[SampleRecord]],
    ls: LabelSpace,
    cfg: TrainConfig,
    provider: Optional[MaskProvider],
    edge_op: EdgeOperator,
    out_dir: Optional[Path],
) -> AblationRun:
    torch.set_num_threads(1)
    run_cfg = replace(cfg, seed=seed)
    train, val = stratified_split(src, run_cfg.val_fraction, seed)
    run_dir = out_dir / f"{variant}_seed{seed}" if out_dir is not None else None
    res = run_training(train, ls, run_cfg, VARIANTS[variant], val, provider, edge_op, run_dir)
    # the final checkpoint is scored, so every variant is judged after the same number of epochs
    _, rows = evaluate_targets(res.checkpoint, targets)
    avg = {k: rows[-1][k] for k in ("acc_k", "acc_u", "acc", "hs")}
    return AblationRun(variant, seed, avg, rows[:-1])


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def ablation_table(runs: Sequence[AblationRun]) -> list[dict]:
    """One row per (variant, seed) followed by one mean row per variant."""
    rows = [{"variant": r.variant, "seed": r.seed, **r.metrics} for r in runs]
    for v in dict.fromkeys(r.variant for r in runs):
        mine = [r for r in runs if r.variant == v]
        rows.append({"variant": v, "seed": "mean", **{k: _mean(r.metrics[k] for r in mine) for k in mine[0].metrics}})
    return rows


def run_ablation(
    src: Sequence[SampleRecord],
    targets: Mapping[str, Sequence[SampleRecord]],
    ls: LabelSpace,
    cfg: TrainConfig,
    variants: Sequence[str] = DEFAULT_GRID,
    seeds: Sequence[int] = (0, 1, 2),
    provider: Optional[MaskProvider] = None,
    edge_op: EdgeOperator = EdgeOperator(),
    out_dir: Optional[str | Path] = None,
    jobs: int = 1,
) -> tuple[list[AblationRun], list[dict]]:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {unknown}; choose from {sorted(VARIANTS)}")
    cfg = validate_config(cfg)
    out = Path(out_dir) if out_dir is not None else None
    grid = [(v, s) for v in variants for s in seeds]
    args = (src, targets, ls, cfg, provider, edge_op, out)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_one, *zip(*[(v, s, *args) for v, s in grid])))
    else:
        runs = [_run_one(v, s, *args) for v, s in grid]
    table = ablation_table(runs)
    if out is not None:
        write_jsonl(out / "ablation.jsonl", table)
        write_jsonl(out / "ablation_per_domain.jsonl", [{"variant": r.variant, "seed": r.seed, **d} for r in runs for d in r.per_domain])
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, ["variant", "seed", "acc_k", "acc_u", "acc", "hs"])
            w.writeheader()
            w.writerows(table)
    return runs, table


def format_table(rows: Sequence[dict]) -> str:
    def cell(v: Any) -> str:
        return "-" if v is None else f"{v:.2f}" if isinstance(v, float) else str(v)

    keys = ["variant", "seed", "acc_k", "acc_u", "acc", "hs"]
    lines = ["  ".join(f"{k:>8}" for k in keys)]
    lines += ["  ".join(f"{cell(r.get(k)):>8}" for k in keys) for r in rows]
    return "\n".join(lines)
