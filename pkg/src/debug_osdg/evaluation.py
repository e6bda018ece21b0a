"""Entropy-thresholded open-set inference and acc_k / acc_u / acc / hs metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .core import DataError, LabelSpace, SampleRecord
from .data import _check_class_names
from .trainer import Checkpoint, normalize


def entropy_threshold(num_known: int) -> float:
    return 0.5 * math.log2(num_known)


@dataclass
class OpenSetPrediction:
    scores: torch.Tensor  # B x K softmax
    entropy_bits: torch.Tensor  # B
    decision: torch.Tensor  # B, known id or unknown token


def entropy_bits(scores: torch.Tensor) -> torch.Tensor:
    return -torch.special.xlogy(scores, scores).sum(dim=-1) / math.log(2)


def decide(logits: torch.Tensor, label_space: LabelSpace) -> OpenSetPrediction:
    """Known argmax iff entropy < 0.5 * log2 K (ties go to unknown)."""
    if logits.dim() == 1:
        logits = logits[None]
    if logits.shape[-1] != label_space.num_known:
        raise DataError(f"logits have {logits.shape[-1]} classes, label space has {label_space.num_known}")
    scores = F.softmax(logits.double(), dim=-1)
    h = entropy_bits(scores).clamp(0, math.log2(label_space.num_known))
    known = h < entropy_threshold(label_space.num_known)
    decision = torch.where(known, scores.argmax(-1), torch.full_like(h, label_space.unknown_token, dtype=torch.long))
    return OpenSetPrediction(scores, h, decision)


@dataclass
class Metrics:
    acc_k: float
    acc_u: Optional[float]
    acc: float
    hs: Optional[float]
    n_samples: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def h_score(acc_k: float, acc_u: float) -> float:
    denom = acc_k + acc_u
    return 2 * acc_k * acc_u / denom if denom > 0 else 0.0


def compute_metrics(
    decisions: Sequence[int] | torch.Tensor, truths: Sequence[int] | torch.Tensor, label_space: LabelSpace
) -> Metrics:
    """Per-class accuracies; unknowns form one extra class. Classes absent from `truths` are skipped."""
    d = torch.as_tensor(decisions, dtype=torch.long).flatten()
    t = torch.as_tensor(truths, dtype=torch.long).flatten()
    if d.shape != t.shape:
        raise DataError(f"{d.numel()} decisions for {t.numel()} ground truths")
    u = label_space.unknown_token
    if t.numel() and (t.min() < 0 or t.max() > u):
        raise DataError(f"ground truths must lie in 0..{u}")
    known_accs = []
    for c in range(label_space.num_known):
        sel = t == c
        if sel.any():
            known_accs.append(100.0 * float((d[sel] == c).double().mean()))
    sel_u = t == u
    acc_u = 100.0 * float((d[sel_u] == u).double().mean()) if sel_u.any() else None
    acc_k = sum(known_accs) / len(known_accs) if known_accs else 0.0
    per_class = known_accs + ([acc_u] if acc_u is not None else [])
    acc = sum(per_class) / len(per_class) if per_class else 0.0
    hs = h_score(acc_k, acc_u) if acc_u is not None else None
    return Metrics(acc_k, acc_u, acc, hs, int(t.numel()))


@torch.no_grad()
def predict_logits(ckpt: Checkpoint, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    ckpt.model.eval()
    x = normalize(images, ckpt.mean, ckpt.std)
    return torch.cat([ckpt.model(x[i : i + batch_size]).logits for i in range(0, len(x), batch_size)])


@torch.no_grad()
def predict_features(ckpt: Checkpoint, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    ckpt.model.eval()
    x = normalize(images, ckpt.mean, ckpt.std)
    return torch.cat([ckpt.model(x[i : i + batch_size]).pooled for i in range(0, len(x), batch_size)])


def evaluate_domain(
    ckpt: Checkpoint,
    records: Sequence[SampleRecord],
    dump_path: Optional[str | Path] = None,
) -> tuple[Metrics, list[dict]]:
    """Eval-mode inference on one target domain. Labels are remapped by class name onto the checkpoint's label space."""
    ls = ckpt.label_space
    if not records:
        raise DataError("empty evaluation set")
    _check_class_names(ls.known_classes, {r.class_name for r in records if r.class_name})
    truths = [ls.index(r.class_name) if r.class_name else r.label for r in records]
    logits = predict_logits(ckpt, torch.stack([r.image for r in records]))
    pred = decide(logits, ls)
    metrics = compute_metrics(pred.decision, truths, ls)
    dump = [
        {
            "id": r.sample_id,
            "domain": r.domain,
            "label": int(y),
            "scores": [float(s) for s in pred.scores[i]],
            "entropy_bits": float(pred.entropy_bits[i]),
            "decision": int(pred.decision[i]),
        }
        for i, (r, y) in enumerate(zip(records, truths))
    ]
    if dump_path is not None:
        write_jsonl(dump_path, dump)
    return metrics, dump


def summarize(per_domain: dict[str, Metrics]) -> list[dict]:
    """One row per domain plus an ``avg`` row (mean of each metric over domains that report it)."""
    rows = [{"domain": d, **m.as_dict()} for d, m in per_domain.items()]
    avg: dict = {"domain": "avg"}
    for key in ("acc_k", "acc_u", "acc", "hs"):
        vals = [m.as_dict()[key] for m in per_domain.values() if m.as_dict()[key] is not None]
        avg[key] = sum(vals) / len(vals) if vals else None
    avg["n_samples"] = sum(m.n_samples for m in per_domain.values())
    rows.append(avg)
    return rows


def write_jsonl(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
