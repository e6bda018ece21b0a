"""Synthetic multi-domain open-set shape benchmark and directory-manifest loader.

On-disk layout (shared by real and synthetic data)::

    <root>/known_classes.txt            one known class per line
    <root>/<domain>/<class>/<stem>.png  images
    <root>/masks/<domain>/<class>/<stem>.png   optional, nonzero = foreground
    <root>/edges/<domain>/<class>/<stem>.png   optional precomputed edge maps
    <root>/index.json                   optional, written by write_index
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .core import ConfigError, DataError, LabelSpace, SampleRecord, make_label_space

RESERVED_DIRS = {"masks", "edges"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

KNOWN_SHAPES = ("circle", "square", "triangle", "cross")
UNKNOWN_SHAPES = ("star", "ring", "ellipse")
ALL_SHAPES = KNOWN_SHAPES + UNKNOWN_SHAPES + ("hexagon", "diamond")

# minimum L2 distance between per-domain mean RGB colours of the default recipes
DOMAIN_SHIFT_MARGIN = 0.05


@dataclass
class DomainStyle:
    name: str
    texture: str = "noise"  # noise | stripes | checker | plain
    fg_sat: tuple[float, float] = (0.3, 0.6)
    fg_val: tuple[float, float] = (0.4, 0.8)
    bg_sat: tuple[float, float] = (0.2, 0.5)
    bg_val: tuple[float, float] = (0.3, 0.7)
    jitter: float = 0.03
    pixel_noise: float = 0.03
    # probability that the background hue is tied to the class (spurious context)
    context_bias: float = 0.0


DEFAULT_DOMAINS = (
    DomainStyle("photo", texture="noise", context_bias=0.8),
    DomainStyle(
        "cartoon",
        texture="stripes",
        fg_sat=(0.7, 1.0),
        fg_val=(0.75, 1.0),
        bg_sat=(0.5, 0.9),
        bg_val=(0.55, 0.95),
        jitter=0.06,
        pixel_noise=0.01,
    ),
    DomainStyle(
        "mosaic",
        texture="checker",
        fg_sat=(0.0, 0.3),
        fg_val=(0.1, 0.5),
        bg_sat=(0.3, 0.7),
        bg_val=(0.5, 0.9),
        jitter=0.08,
        pixel_noise=0.05,
    ),
)


@dataclass
class SyntheticSpec:
    known_classes: tuple[str, ...] = KNOWN_SHAPES
    unknown_classes: tuple[str, ...] = UNKNOWN_SHAPES
    domains: tuple[DomainStyle, ...] = DEFAULT_DOMAINS
    samples_per_class_per_domain: int = 25
    image_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        overlap = set(self.known_classes) & set(self.unknown_classes)
        if overlap:
            raise ConfigError(f"classes both known and unknown: {sorted(overlap)}")
        bad = [c for c in (*self.known_classes, *self.unknown_classes) if c not in ALL_SHAPES]
        if bad:
            raise ConfigError(f"unsupported shape(s) {bad}; choose from {ALL_SHAPES}")
        if len(self.domains) < 2:
            raise ConfigError("need at least 2 domains")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError("domain names must be unique")
        make_label_space(self.known_classes)
        if self.samples_per_class_per_domain < 1 or self.image_size < 8:
            raise ConfigError("need >= 1 sample per class per domain and image_size >= 8")

    @property
    def all_classes(self) -> tuple[str, ...]:
        return tuple(self.known_classes) + tuple(self.unknown_classes)


def _polygon_inside(u: np.ndarray, v: np.ndarray, n: int, radius: float, offset: float) -> np.ndarray:
    inradius = radius * np.cos(np.pi / n)
    inside = np.ones_like(u, dtype=bool)
    for k in range(n):
        a = offset + 2 * np.pi * k / n
        inside &= u * np.cos(a) + v * np.sin(a) < inradius
    return inside


def shape_mask(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Boolean foreground for a centred, rotated, warped coordinate grid."""
    rho = np.hypot(u, v)
    if shape == "circle":
        return rho < r
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.8 * r
    if shape == "triangle":
        return _polygon_inside(u, v, 3, r, np.pi / 2)
    if shape == "cross":
        w = 0.3 * r
        return ((np.abs(u) < w) & (np.abs(v) < r)) | ((np.abs(v) < w) & (np.abs(u) < r))
    if shape == "star":
        phi = np.arctan2(v, u)
        return rho < r * (0.55 + 0.45 * np.cos(5 * phi))
    if shape == "ring":
        return (rho < r) & (rho > 0.55 * r)
    if shape == "ellipse":
        return (u / r) ** 2 + (v / (0.5 * r)) ** 2 < 1
    if shape == "hexagon":
        return _polygon_inside(u, v, 6, r, 0.0)
    if shape == "diamond":
        return np.abs(u) / r + np.abs(v) / (0.6 * r) < 1
    raise ConfigError(f"unknown shape {shape!r}")


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _texture(style: DomainStyle, size: int, rng: np.random.Generator, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    """Blend weight in [0, 1] between two background colours."""
    if style.texture == "noise":
        coarse = rng.random((5, 5))
        t = torch.from_numpy(coarse)[None, None]
        up = torch.nn.functional.interpolate(t, size=(size, size), mode="bicubic", align_corners=True)
        return np.clip(up[0, 0].numpy(), 0, 1)
    if style.texture == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(6, 12)
        phase = rng.uniform(0, 2 * np.pi)
        return (np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase) > 0).astype(np.float64)
    if style.texture == "checker":
        s = rng.uniform(2.5, 5)
        ox, oy = rng.uniform(0, 1, size=2)
        return ((np.floor((xx + 1) * s + ox) + np.floor((yy + 1) * s + oy)) % 2).astype(np.float64)
    if style.texture == "plain":
        return np.zeros((size, size))
    raise ConfigError(f"unknown texture {style.texture!r}")


def render_sample(
    shape: str, class_index: int, n_classes: int, style: DomainStyle, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (HxWx3 float image in [0,1], HxW bool mask)."""
    c = (np.arange(size) + 0.5) / size * 2 - 1
    yy, xx = np.meshgrid(c, c, indexing="ij")
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    r = rng.uniform(0.55, 0.8)
    theta = rng.uniform(0, 2 * np.pi)
    u0, v0 = xx - cx, yy - cy
    u = u0 * np.cos(theta) + v0 * np.sin(theta)
    v = -u0 * np.sin(theta) + v0 * np.cos(theta)
    f = rng.uniform(2, 5)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    u, v = u + style.jitter * np.sin(f * v + p1), v + style.jitter * np.sin(f * u + p2)
    mask = shape_mask(shape, u, v, r)

    fg = _hsv(rng.uniform(), rng.uniform(*style.fg_sat), rng.uniform(*style.fg_val))
    if rng.uniform() < style.context_bias:
        bg_hue = class_index / n_classes + rng.normal(0, 0.02)
    else:
        bg_hue = rng.uniform()
    bg1 = _hsv(bg_hue, rng.uniform(*style.bg_sat), rng.uniform(*style.bg_val))
    bg2 = _hsv(bg_hue + rng.uniform(-0.08, 0.08), rng.uniform(*style.bg_sat), rng.uniform(*style.bg_val))
    t = _texture(style, size, rng, xx, yy)[..., None]
    background = bg1 * (1 - t) + bg2 * t
    shade = 1 + 0.15 * (u / max(r, 1e-6))[..., None]
    foreground = np.clip(fg * shade, 0, 1)
    img = np.where(mask[..., None], foreground, background)
    img = img + rng.normal(0, style.pixel_noise, img.shape)
    return np.clip(img, 0, 1), mask


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec) -> list[SampleRecord]:
    """Deterministic under `spec.seed`. Images are quantized to 8 bits so the
    in-memory and on-disk versions are identical. Records carry labels over the
    full class list (known ids first, unknowns after)."""
    spec.validate()
    records: list[SampleRecord] = []
    classes = spec.all_classes
    for d_idx, style in enumerate(spec.domains):
        for c_idx, cls in enumerate(classes):
            rng = np.random.default_rng([spec.seed, d_idx, c_idx])
            for i in range(spec.samples_per_class_per_domain):
                img, mask = render_sample(cls, c_idx, len(classes), style, spec.image_size, rng)
                img8 = to_uint8(img)
                records.append(
                    SampleRecord(
                        image=torch.from_numpy(img8).permute(2, 0, 1).float() / 255.0,
                        label=c_idx,
                        domain=style.name,
                        class_name=cls,
                        sample_id=f"{style.name}/{cls}/{cls}_{i:05d}.png",
                        mask=torch.from_numpy(mask.astype(np.float32)),
                    )
                )
    return records


def domain_pixel_means(records: Sequence[SampleRecord]) -> dict[str, np.ndarray]:
    """Per-domain average of the per-image channel means and channel stds (a 6-vector for RGB)."""
    out: dict[str, list[torch.Tensor]] = {}
    for r in records:
        out.setdefault(r.domain, []).append(torch.cat([r.image.mean(dim=(1, 2)), r.image.std(dim=(1, 2))]))
    return {d: torch.stack(v).mean(0).numpy() for d, v in out.items()}


def min_domain_shift(records: Sequence[SampleRecord]) -> float:
    """Smallest pairwise L2 distance between per-domain pixel statistics.

    Compare against ``DOMAIN_SHIFT_MARGIN``; means alone average hues away, so the
    channel spread is part of the statistic.
    """
    means = list(domain_pixel_means(records).values())
    return min(
        float(np.linalg.norm(means[i] - means[j])) for i in range(len(means)) for j in range(i + 1, len(means))
    )


def save_dataset(records: Sequence[SampleRecord], root: str | Path, known_classes: Sequence[str]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "known_classes.txt").write_text("\n".join(known_classes) + "\n")
    for r in records:
        rel = Path(r.sample_id)
        img_path = root / rel
        img_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(r.image.permute(1, 2, 0).numpy())).save(img_path)
        if r.mask is not None:
            m_path = root / "masks" / rel.parent / f"{rel.stem}.png"
            m_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray((r.mask.numpy() > 0).astype(np.uint8) * 255).save(m_path)
    return root


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to root: <domain>/<class>/<file>
    domain: str
    class_name: str


@dataclass
class DatasetManifest:
    root: Path
    known_classes: tuple[str, ...]
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def domains(self) -> list[str]:
        return sorted({e.domain for e in self.entries})

    @property
    def classes(self) -> list[str]:
        return sorted({e.class_name for e in self.entries})


def read_known_classes(root: Path) -> tuple[str, ...]:
    p = root / "known_classes.txt"
    if not p.is_file():
        raise DataError(f"{root}: missing known_classes.txt")
    names = tuple(line.strip() for line in p.read_text().splitlines() if line.strip())
    make_label_space(names)
    return names


def scan_manifest(root: str | Path, known_classes: Optional[Sequence[str]] = None) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    known = tuple(known_classes) if known_classes else read_known_classes(root)
    entries: list[ManifestEntry] = []
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name not in RESERVED_DIRS)
    if not domain_dirs:
        raise DataError(f"{root}: no domain directories")
    for ddir in domain_dirs:
        found = 0
        for cdir in sorted(p for p in ddir.iterdir() if p.is_dir()):
            for f in sorted(cdir.iterdir()):
                if f.suffix.lower() in IMAGE_SUFFIXES:
                    entries.append(ManifestEntry(f"{ddir.name}/{cdir.name}/{f.name}", ddir.name, cdir.name))
                    found += 1
        if found == 0:
            raise DataError(f"domain directory {ddir} contains no images")
    _check_class_names(known, {e.class_name for e in entries})
    return DatasetManifest(root, known, entries)


def _check_class_names(known: Sequence[str], present: Iterable[str]) -> None:
    lowered = {k.lower(): k for k in known}
    for name in present:
        if name == "unknown":
            raise DataError("class directory named 'unknown' collides with the rejection label")
        k = lowered.get(name.lower())
        if k is not None and k != name:
            raise DataError(f"class {name!r} collides with known class {k!r}")


def write_index(manifest: DatasetManifest, path: Optional[str | Path] = None) -> Path:
    path = Path(path) if path else manifest.root / "index.json"
    payload = {"known_classes": list(manifest.known_classes), "samples": [asdict(e) for e in manifest.entries]}
    path.write_text(json.dumps(payload, indent=1))
    return path


def read_index(root: str | Path, path: Optional[str | Path] = None) -> DatasetManifest:
    root = Path(root)
    path = Path(path) if path else root / "index.json"
    payload = json.loads(path.read_text())
    entries = [ManifestEntry(**e) for e in payload["samples"]]
    missing = [e.path for e in entries if not (root / e.path).is_file()]
    if missing:
        raise DataError(f"index lists {len(missing)} missing file(s), e.g. {missing[0]}")
    return DatasetManifest(root, tuple(payload["known_classes"]), entries)


def load_image(path: Path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _load_mask(root: Path, e: ManifestEntry) -> Optional[torch.Tensor]:
    p = root / "masks" / e.domain / e.class_name / f"{Path(e.path).stem}.png"
    if not p.is_file():
        return None
    return torch.from_numpy((np.asarray(Image.open(p).convert("L")) > 0).astype(np.float32))


def load_domain(
    manifest: DatasetManifest,
    domain: str,
    label_space: LabelSpace,
    known_only: bool = False,
    require_masks: bool = False,
) -> list[SampleRecord]:
    entries = [e for e in manifest.entries if e.domain == domain]
    if not entries:
        raise DataError(f"domain {domain!r} not found or empty under {manifest.root}")
    if known_only:
        entries = [e for e in entries if label_space.is_known(e.class_name)]
    records = []
    for e in entries:
        mask = _load_mask(manifest.root, e)
        if mask is None and require_masks:
            raise DataError(f"missing mask for sample {e.path}")
        records.append(
            SampleRecord(
                image=load_image(manifest.root / e.path),
                label=label_space.index(e.class_name),
                domain=e.domain,
                class_name=e.class_name,
                sample_id=e.path,
                mask=mask,
            )
        )
    return records


def load_manifest(
    root: str | Path,
    source: str,
    targets: Optional[Sequence[str]] = None,
    require_masks: bool = False,
) -> tuple[LabelSpace, list[SampleRecord], dict[str, list[SampleRecord]]]:
    """Source domain filtered to known classes; targets keep every class, unknowns mapped to the unknown token."""
    root = Path(root)
    manifest = read_index(root) if (root / "index.json").is_file() else scan_manifest(root)
    ls = make_label_space(manifest.known_classes)
    if source not in manifest.domains:
        raise DataError(f"source domain {source!r} not in {manifest.domains}")
    targets = list(targets) if targets else [d for d in manifest.domains if d != source]
    src = load_domain(manifest, source, ls, known_only=True, require_masks=require_masks)
    missing = [k for k in ls.known_classes if not any(r.class_name == k for r in src)]
    if missing:
        raise DataError(f"source domain {source!r} has no samples of known class(es) {missing}")
    tgt = {d: load_domain(manifest, d, ls) for d in targets}
    return ls, src, tgt


def relabel(records: Sequence[SampleRecord], label_space: LabelSpace) -> list[SampleRecord]:
    """Map class names onto `label_space` (unknown classes -> unknown token)."""
    out = []
    for r in records:
        out.append(SampleRecord(r.image, label_space.index(r.class_name), r.domain, r.class_name, r.sample_id, r.mask, r.edge))
    return out


def stratified_split(
    records: Sequence[SampleRecord], fraction: float, seed: int
) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Seeded per-class split; returns (train, val) with ~`fraction` of each class in val."""
    if fraction <= 0:
        return list(records), []
    g = torch.Generator().manual_seed(seed)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    val_idx: set[int] = set()
    for label in sorted(by_class):
        idx = by_class[label]
        n_val = int(round(len(idx) * fraction))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        perm = torch.randperm(len(idx), generator=g).tolist()
        val_idx.update(idx[p] for p in perm[:n_val])
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val
