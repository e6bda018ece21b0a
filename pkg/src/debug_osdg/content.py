"""Content-side augmentation: background suppression and edge maps."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import ConfigError, DataError, SampleRecord

LUMA = (0.299, 0.587, 0.114)


class MaskProvider:
    kind = "base"

    def mask_for(self, sample: SampleRecord) -> torch.Tensor:
        raise NotImplementedError


class OracleMasks(MaskProvider):
    """Uses the mask already attached to the sample (synthetic data)."""

    kind = "oracle"

    def mask_for(self, sample: SampleRecord) -> torch.Tensor:
        if sample.mask is None:
            raise DataError(f"sample {sample.sample_id or '?'} carries no oracle mask")
        return sample.mask


class SidecarMasks(MaskProvider):
    """Reads ``<root>/masks/<domain>/<class>/<stem>.png``; nonzero pixels are foreground."""

    kind = "sidecar_files"

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def path_for(self, sample: SampleRecord) -> Path:
        stem = Path(sample.sample_id).stem
        return self.root / "masks" / sample.domain / sample.class_name / f"{stem}.png"

    def mask_for(self, sample: SampleRecord) -> torch.Tensor:
        p = self.path_for(sample)
        if not p.is_file():
            raise DataError(f"missing mask for sample {sample.sample_id}: {p}")
        arr = np.asarray(Image.open(p).convert("L"))
        mask = torch.from_numpy((arr > 0).astype(np.float32))
        if tuple(mask.shape) != tuple(sample.image.shape[1:]):
            raise DataError(f"mask {p} has shape {tuple(mask.shape)}, image is {tuple(sample.image.shape[1:])}")
        return mask


class AllForeground(MaskProvider):
    kind = "all_foreground"

    def mask_for(self, sample: SampleRecord) -> torch.Tensor:
        return torch.ones(sample.image.shape[1:], dtype=sample.image.dtype)


def make_mask_provider(kind: str, root: str | Path | None = None) -> MaskProvider:
    if kind == "oracle":
        return OracleMasks()
    if kind == "all_foreground":
        return AllForeground()
    if kind in ("sidecar", "sidecar_files"):
        if root is None:
            raise ConfigError("sidecar mask provider needs a data root")
        return SidecarMasks(root)
    raise ConfigError(f"mask_provider: unknown kind {kind!r}")


def apply_mask(image: torch.Tensor, mask: torch.Tensor, fill: torch.Tensor) -> torch.Tensor:
    """Batched or single-image form; `fill` is a per-channel colour."""
    m = mask.to(image.dtype).unsqueeze(-3)
    f = fill.to(image.dtype).reshape(-1, 1, 1)
    return image * m + f * (1 - m)


def suppress_background(
    sample: SampleRecord, provider: MaskProvider, fill: Optional[torch.Tensor] = None
) -> SampleRecord:
    """Replace background pixels with `fill` (the dataset channel mean; zero if omitted)."""
    mask = provider.mask_for(sample)
    if fill is None:
        fill = torch.zeros(sample.image.shape[0])
    return dataclasses.replace(sample, image=apply_mask(sample.image, mask, fill), mask=mask)


@dataclass(frozen=True)
class EdgeOperator:
    kind: str = "gradient_magnitude"
    blur_radius: int = 1
    normalize: bool = True
    root: Optional[str] = None  # for kind == "external_files"

    def __post_init__(self) -> None:
        if self.kind not in ("gradient_magnitude", "external_files"):
            raise ConfigError(f"edge operator: unknown kind {self.kind!r}")
        if self.blur_radius < 0:
            raise ConfigError("edge operator: blur_radius must be >= 0")
        if self.kind == "external_files" and not self.root:
            raise ConfigError("edge operator: external_files needs a data root")


def gradient_magnitude(images: torch.Tensor, blur_radius: int = 0, normalize: bool = True) -> torch.Tensor:
    """Edge maps for a batch ``B x 3 x H x W`` (or a single ``3 x H x W``) of images in [0, 1].

    Forward differences along x and y (zero at the last column/row), magnitude,
    per-image max normalization, replicated to 3 channels.
    """
    single = images.dim() == 3
    x = images.unsqueeze(0) if single else images
    w = torch.tensor(LUMA, dtype=x.dtype).reshape(1, 3, 1, 1)
    gray = (x * w).sum(dim=1, keepdim=True) if x.shape[1] == 3 else x.mean(dim=1, keepdim=True)
    if blur_radius > 0:
        k = 2 * blur_radius + 1
        gray = F.avg_pool2d(F.pad(gray, [blur_radius] * 4, mode="replicate"), k, stride=1)
    gx = torch.zeros_like(gray)
    gy = torch.zeros_like(gray)
    gx[..., :, :-1] = gray[..., :, 1:] - gray[..., :, :-1]
    gy[..., :-1, :] = gray[..., 1:, :] - gray[..., :-1, :]
    mag = (gx * gx + gy * gy).sqrt()
    # exact zeros stay zero: float rounding of a constant shift must not register as an edge
    mag = torch.where(mag < 1e-6, torch.zeros_like(mag), mag)
    if normalize:
        peak = mag.amax(dim=(2, 3), keepdim=True)
        mag = torch.where(peak > 0, mag / peak.clamp_min(1e-12), mag)
    else:
        mag = mag.clamp(0, 1)
    out = mag.expand(-1, 3, -1, -1).contiguous()
    return out[0] if single else out


def extract_edges(sample: SampleRecord, op: EdgeOperator = EdgeOperator()) -> SampleRecord:
    if op.kind == "external_files":
        stem = Path(sample.sample_id).stem
        p = Path(op.root) / "edges" / sample.domain / sample.class_name / f"{stem}.png"
        if not p.is_file():
            raise DataError(f"missing edge map for sample {sample.sample_id}: {p}")
        arr = np.asarray(Image.open(p).convert("L"), dtype=np.float32) / 255.0
        edge = torch.from_numpy(arr).unsqueeze(0).expand(3, -1, -1).contiguous()
    else:
        edge = gradient_magnitude(sample.image, op.blur_radius, op.normalize)
    return dataclasses.replace(sample, edge=edge)


def extract_edges_all(samples: Sequence[SampleRecord], op: EdgeOperator = EdgeOperator()) -> list[SampleRecord]:
    return [extract_edges(s, op) for s in samples]
