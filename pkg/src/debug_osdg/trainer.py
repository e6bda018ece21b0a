"""Training step, epoch loop, ablation switches and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import torch

from .content import EdgeOperator, MaskProvider, OracleMasks, apply_mask, gradient_magnitude, extract_edges
from .core import (
    ConfigError,
    DataError,
    LabelSpace,
    LossBreakdown,
    NumericError,
    SampleRecord,
    TrainConfig,
    make_label_space,
    validate_config,
)
from .losses import ce_loss, eova_loss, kd_loss, ova_loss, total_loss
from .model import DebugNet, binary_probs

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AblationSwitches:
    use_bs: bool = True
    use_gpsa: bool = True
    use_kd: bool = True
    use_eova: bool = True
    use_ova_at_all: bool = True

    def __post_init__(self) -> None:
        if self.use_kd and not (self.use_bs or self.use_gpsa):
            raise ConfigError("use_kd needs background suppression or GPSA to build a distinct teacher branch")
        if self.use_eova and not self.use_ova_at_all:
            raise ConfigError("use_eova needs use_ova_at_all")

    @classmethod
    def without(cls, components: Iterable[str]) -> "AblationSwitches":
        """Full method minus the named components (bs, gpsa, kd, eova, ova)."""
        flags = asdict(cls())
        for c in components:
            c = c.strip().lower()
            if not c:
                continue
            key = "use_ova_at_all" if c == "ova" else f"use_{c}"
            if key not in flags:
                raise ConfigError(f"--ablate: unknown component {c!r} (choose from bs, gpsa, kd, eova, ova)")
            flags[key] = False
        if not flags["use_ova_at_all"]:
            flags["use_eova"] = False
        if not (flags["use_bs"] or flags["use_gpsa"]):
            flags["use_kd"] = False
        return cls(**flags)


VARIANTS: dict[str, AblationSwitches] = {
    "ce": AblationSwitches(False, False, False, False, False),
    "ova": AblationSwitches(False, False, False, False, True),
    "bs_kd": AblationSwitches(True, False, True, False, True),
    "gpsa_kd": AblationSwitches(False, True, True, False, True),
    "de_ova": AblationSwitches(True, True, True, False, True),
    "eova": AblationSwitches(False, False, False, True, True),
    "debug": AblationSwitches(True, True, True, True, True),
}
DEFAULT_GRID = ("ce", "ova", "de_ova", "eova", "debug")


class TrainBatch(NamedTuple):
    x: torch.Tensor  # normalized images
    x_bs: torch.Tensor  # normalized background-suppressed images
    x_edge: torch.Tensor  # normalized edge maps of the original images
    y: torch.Tensor


@dataclass
class TrainingTensors:
    images: torch.Tensor
    bs_images: torch.Tensor
    edges: torch.Tensor
    labels: torch.Tensor
    mean: torch.Tensor
    std: torch.Tensor

    def __len__(self) -> int:
        return self.labels.numel()

    def batch(self, idx: torch.Tensor) -> TrainBatch:
        return TrainBatch(self.images[idx], self.bs_images[idx], self.edges[idx], self.labels[idx])


def channel_stats(images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-3)
    return mean, std


def normalize(images: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    return (images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)


def prepare_training_tensors(
    records: Sequence[SampleRecord],
    label_space: LabelSpace,
    provider: Optional[MaskProvider] = None,
    edge_op: EdgeOperator = EdgeOperator(),
    mean: Optional[torch.Tensor] = None,
    std: Optional[torch.Tensor] = None,
) -> TrainingTensors:
    if not records:
        raise DataError("no training samples")
    labels = torch.tensor([r.label for r in records], dtype=torch.long)
    if labels.min() < 0 or labels.max() >= label_space.num_known:
        raise DataError("training data contains samples outside the known label space")
    counts = torch.bincount(labels, minlength=label_space.num_known)
    empty = [label_space.known_classes[i] for i in range(label_space.num_known) if counts[i] == 0]
    if empty:
        raise DataError(f"no training samples for class(es) {empty}")
    images = torch.stack([r.image for r in records])
    if mean is None or std is None:
        mean, std = channel_stats(images)
    provider = provider or OracleMasks()
    masks = torch.stack([provider.mask_for(r) for r in records])
    bs = apply_mask(images, masks, mean)
    if edge_op.kind == "gradient_magnitude":
        edges = gradient_magnitude(images, edge_op.blur_radius, edge_op.normalize)
    else:
        edges = torch.stack([extract_edges(r, edge_op).edge for r in records])
    return TrainingTensors(
        normalize(images, mean, std), normalize(bs, mean, std), normalize(edges, mean, std), labels, mean, std
    )


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        model.parameters(),
        lr=cfg.lr,
        momentum=cfg.momentum,
        nesterov=cfg.momentum > 0,
        weight_decay=cfg.weight_decay,
    )


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay; `epoch` is 0-based."""
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def build_model(cfg: TrainConfig, num_classes: int) -> DebugNet:
    return DebugNet(num_classes, cfg.widths, cfg.gpsa_stages, cfg.alpha, cfg.gpsa_prob)


def compute_losses(
    model: DebugNet,
    batch: TrainBatch,
    cfg: TrainConfig,
    switches: AblationSwitches,
    generator: Optional[torch.Generator] = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Forward passes and the combined objective, without touching the optimizer.

    A switched-on term with a zero weight is skipped entirely, so it cannot
    influence BatchNorm statistics or the random stream.
    """
    use_kd = switches.use_kd and cfg.lambda2 > 0
    use_ova = switches.use_ova_at_all and cfg.lambda1 > 0
    x, x_bs, x_edge, y = batch
    if y.numel() and y.max() >= model.num_classes:
        raise DataError("unknown-class sample reached a training batch")

    out = model(x, use_gpsa=switches.use_gpsa, generator=generator)
    ce_terms = [ce_loss(out.logits, y)]
    out_t = None
    if switches.use_bs or use_kd:
        out_t = model(x_bs if switches.use_bs else x, use_gpsa=switches.use_gpsa, generator=generator)
        ce_terms.append(ce_loss(out_t.logits, y))
    ce = torch.stack(ce_terms).mean()

    kd = kd_loss(out.fmap, out_t.fmap, cfg.tau) if use_kd else torch.zeros(())

    ova = torch.zeros(())
    if use_ova:
        pos, neg = binary_probs(out.binary_logits)
        if switches.use_eova:
            out_e = model(x_edge, use_gpsa=False)
            e_pos, e_neg = binary_probs(out_e.binary_logits)
            ova = eova_loss(e_pos, e_neg, neg, y)
        else:
            ova = ova_loss(pos, neg, y)

    return total_loss(ce, ova, kd, cfg.lambda1 if use_ova else 0.0, cfg.lambda2 if use_kd else 0.0)


def train_step(
    model: DebugNet,
    optimizer: torch.optim.Optimizer,
    batch: TrainBatch,
    cfg: TrainConfig,
    switches: AblationSwitches,
    generator: Optional[torch.Generator] = None,
) -> LossBreakdown:
    model.train()
    total, breakdown = compute_losses(model, batch, cfg, switches, generator)
    if not math.isfinite(breakdown.total):
        raise NumericError(f"non-finite total loss {breakdown.total}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return breakdown


@dataclass
class Checkpoint:
    model: DebugNet
    config: TrainConfig
    label_space: LabelSpace
    mean: torch.Tensor
    std: torch.Tensor
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    epoch: int = 0

    def state(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model_state": self.model.state_dict(),
            "uncertainty": self.model.uncertainty_state(),
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "known_classes": list(self.label_space.known_classes),
            "mean": self.mean.clone(),
            "std": self.std.clone(),
            "switches": asdict(self.switches),
            "epoch": self.epoch,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        return path


def load_checkpoint(path: str | Path, expected_classes: Optional[Sequence[str]] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {state.get('format_version')!r}")
    cfg = TrainConfig.from_mapping(state["config"])
    if cfg.digest() != state["config_hash"]:
        raise DataError(f"{path}: config hash mismatch; checkpoint is corrupt or edited")
    ls = make_label_space(state["known_classes"])
    if expected_classes is not None and tuple(expected_classes) != ls.known_classes:
        raise DataError(f"{path}: checkpoint classes {list(ls.known_classes)} != expected {list(expected_classes)}")
    model = build_model(cfg, ls.num_known)
    model.load_state_dict(state["model_state"])
    model.load_uncertainty_state(state["uncertainty"])
    model.eval()
    return Checkpoint(model, cfg, ls, state["mean"], state["std"], AblationSwitches(**state["switches"]), state["epoch"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_val_acc: Optional[float] = None
    best_epoch: Optional[int] = None
    final_path: Optional[Path] = None
    best_path: Optional[Path] = None


@torch.no_grad()
def closed_set_accuracy(model: DebugNet, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(labels), batch_size):
        logits = model(images[i : i + batch_size]).logits
        correct += int((logits.argmax(1) == labels[i : i + batch_size]).sum())
    return 100.0 * correct / max(len(labels), 1)


def run_training(
    train_records: Sequence[SampleRecord],
    label_space: LabelSpace,
    cfg: TrainConfig,
    switches: AblationSwitches = AblationSwitches(),
    val_records: Sequence[SampleRecord] = (),
    provider: Optional[MaskProvider] = None,
    edge_op: EdgeOperator = EdgeOperator(),
    out_dir: Optional[str | Path] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Seeded epoch loop. Writes ``final.pt``, ``best.pt`` and ``train_log.jsonl`` under `out_dir` if given."""
    cfg = validate_config(cfg)
    tensors = prepare_training_tensors(train_records, label_space, provider, edge_op)
    torch.manual_seed(cfg.seed)
    model = build_model(cfg, label_space.num_known)
    optimizer = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    ckpt = Checkpoint(model, cfg, label_space, tensors.mean, tensors.std, switches, 0)

    val_x = val_y = None
    if val_records:
        val_x = normalize(torch.stack([r.image for r in val_records]), tensors.mean, tensors.std)
        val_y = torch.tensor([r.label for r in val_records], dtype=torch.long)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    records: list[dict] = []
    result = TrainResult(ckpt, records)
    step = 0
    n = len(tensors)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            perm = torch.randperm(n, generator=gen)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                if len(idx) < 2 and n >= 2:
                    continue  # BatchNorm cannot train on a single sample
                bd = train_step(model, optimizer, tensors.batch(idx), cfg, switches, gen)
                rec = {"epoch": epoch + 1, "step": step, **bd.as_dict(), "lr": lr}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)
                step += 1
            ckpt.epoch = epoch + 1
            if val_x is not None:
                acc = closed_set_accuracy(model, val_x, val_y)
                log.info("epoch %d val_acc %.2f", epoch + 1, acc)
                if result.best_val_acc is None or acc > result.best_val_acc:
                    result.best_val_acc, result.best_epoch = acc, epoch + 1
                    if out is not None:
                        result.best_path = ckpt.save(out / "best.pt")
        model.eval()
        if out is not None:
            result.final_path = ckpt.save(out / "final.pt")
            summary = {
                "summary": True,
                "epochs": cfg.epochs,
                "steps": step,
                "final": records[-1] if records else None,
                "best_val_acc": result.best_val_acc,
                "best_epoch": result.best_epoch,
                "switches": asdict(switches),
            }
            log_file.write(json.dumps(summary) + "\n")
    finally:
        if log_file:
            log_file.close()
    return result
