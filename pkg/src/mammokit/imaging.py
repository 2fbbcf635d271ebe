"""Pixel plumbing: square resize, four-view composites, label-preserving
augmentation, and class rebalancing.

Composites put the CC views side by side on top and the MLO views on the
bottom, right breast in the left column. Horizontal flips swap the
laterality words in the paired report so image and text stay consistent.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import GroundTruthReport


class ImagingError(Exception):
    pass


class ZeroDimension(ImagingError):
    pass


class SizeMismatch(ImagingError):
    pass


class CapExceeded(ImagingError):
    def __init__(self, label, target: int, original: int):
        super().__init__(
            f"class {label}: target {target} exceeds the 300% augmentation cap (4 x {original} = {4 * original})"
        )
        self.label = label
        self.target = target
        self.original = original


class PlanMismatch(ImagingError):
    pass


@dataclass(frozen=True)
class RasterImage:
    """8-bit image, grayscale (H, W) or RGB (H, W, 3), immutable by contract."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.uint8)
        if arr.ndim == 2:
            pass
        elif arr.ndim == 3 and arr.shape[2] == 3:
            pass
        else:
            raise ValueError(f"expected (H, W) or (H, W, 3) array, got shape {arr.shape}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "array", arr)

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.array.ndim == 2 else 3

    @property
    def pixels(self) -> bytes:
        return self.array.tobytes()

    @classmethod
    def constant(cls, width: int, height: int, value: int, channels: int = 1) -> "RasterImage":
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(np.full(shape, value, dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "RasterImage":
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P", "CMYK") else "L")
            return cls(np.asarray(img))

    def save(self, path: str | Path) -> None:
        self.to_pil().save(path, format="PNG")

    def png_bytes(self) -> bytes:
        import io

        buf = io.BytesIO()
        self.to_pil().save(buf, format="PNG")
        return buf.getvalue()

    def to_pil(self) -> Image.Image:
        return Image.fromarray(self.array, mode="L" if self.channels == 1 else "RGB")


@dataclass(frozen=True)
class ImagingConfig:
    target_side: int = 512
    pad_value: int = 0

    def __post_init__(self):
        if self.target_side <= 0:
            raise ValueError("target_side must be positive")

    @property
    def composite_side(self) -> int:
        return 2 * self.target_side

    def digest(self) -> str:
        blob = json.dumps({"target_side": self.target_side, "pad_value": self.pad_value}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class AugmentationSpec:
    flip_horizontal: bool = False
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not 0.9 <= self.scale <= 1.1:
            raise ValueError(f"scale must be in [0.9, 1.1], got {self.scale}")
        for d in self.translate:
            if not -0.05 <= d <= 0.05:
                raise ValueError(f"translate components must be in [-0.05, 0.05], got {self.translate}")

    def as_dict(self) -> dict:
        return {
            "flip_horizontal": self.flip_horizontal,
            "scale": self.scale,
            "translate": list(self.translate),
            "seed": self.seed,
        }


def resize_square(img: RasterImage, cfg: ImagingConfig) -> RasterImage:
    """Resize to a target_side square: aspect-preserving bilinear resample,
    then symmetric padding with pad_value."""
    if img.width == 0 or img.height == 0:
        raise ZeroDimension(f"cannot resize a {img.width}x{img.height} image")
    side = cfg.target_side
    if img.width == side and img.height == side:
        return img
    scale = side / max(img.width, img.height)
    new_w = max(1, round(img.width * scale))
    new_h = max(1, round(img.height * scale))
    resampled = np.asarray(img.to_pil().resize((new_w, new_h), Image.BILINEAR))
    shape = (side, side) if img.channels == 1 else (side, side, 3)
    canvas = np.full(shape, cfg.pad_value, dtype=np.uint8)
    top = (side - new_h) // 2
    left = (side - new_w) // 2
    canvas[top:top + new_h, left:left + new_w] = resampled
    return RasterImage(canvas)


def compose_four_view(
    r_cc: RasterImage, l_cc: RasterImage, r_mlo: RasterImage, l_mlo: RasterImage, cfg: ImagingConfig
) -> RasterImage:
    """Tile four target_side squares into one composite:
    top row (R-CC, L-CC), bottom row (R-MLO, L-MLO)."""
    tiles = (r_cc, l_cc, r_mlo, l_mlo)
    side = cfg.target_side
    for tile in tiles:
        if tile.width != side or tile.height != side:
            raise SizeMismatch(f"tile is {tile.width}x{tile.height}, expected {side}x{side}")
        if tile.channels != tiles[0].channels:
            raise SizeMismatch("tiles mix grayscale and RGB")
    top = np.concatenate([r_cc.array, l_cc.array], axis=1)
    bottom = np.concatenate([r_mlo.array, l_mlo.array], axis=1)
    return RasterImage(np.concatenate([top, bottom], axis=0))


def decompose_four_view(
    composite: RasterImage, cfg: ImagingConfig
) -> tuple[RasterImage, RasterImage, RasterImage, RasterImage]:
    side = cfg.target_side
    if composite.width != 2 * side or composite.height != 2 * side:
        raise SizeMismatch(f"composite is {composite.width}x{composite.height}, expected {2 * side} square")
    a = composite.array
    return (
        RasterImage(a[:side, :side]),
        RasterImage(a[:side, side:]),
        RasterImage(a[side:, :side]),
        RasterImage(a[side:, side:]),
    )


_LATERALITY_RE = re.compile(r"\b(left|right)\b", re.IGNORECASE)


def swap_laterality(text: str) -> str:
    """Swap left/right words, preserving case of the original token."""

    def repl(m: re.Match) -> str:
        word = m.group(0)
        target = "right" if word.lower() == "left" else "left"
        if word.isupper():
            return target.upper()
        if word[0].isupper():
            return target.capitalize()
        return target

    return _LATERALITY_RE.sub(repl, text)


def augment(
    img: RasterImage, report: GroundTruthReport, spec: AugmentationSpec
) -> tuple[RasterImage, GroundTruthReport]:
    """Apply flip/scale/translate to the image; a flip also swaps laterality
    words in the findings text. Scale and translation leave labels alone."""
    arr = img.array
    out_report = report
    if spec.flip_horizontal:
        arr = arr[:, ::-1]
        out_report = replace(report, findings_text=swap_laterality(report.findings_text))
    if spec.scale != 1.0 or spec.translate != (0.0, 0.0):
        arr = _affine(arr, spec.scale, spec.translate)
    return RasterImage(arr), out_report


def _affine(arr: np.ndarray, scale: float, translate: tuple[float, float]) -> np.ndarray:
    h, w = arr.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx, dy = translate[0] * w, translate[1] * h
    # PIL's AFFINE maps output (x, y) to input coordinates.
    coeffs = (1 / scale, 0.0, cx - (cx + dx) / scale, 0.0, 1 / scale, cy - (cy + dy) / scale)
    mode = "L" if arr.ndim == 2 else "RGB"
    img = Image.fromarray(np.ascontiguousarray(arr), mode=mode)
    moved = img.transform((w, h), Image.AFFINE, coeffs, resample=Image.BILINEAR, fillcolor=0)
    return np.asarray(moved)


@dataclass(frozen=True)
class ClassPlan:
    label: int
    original_count: int
    target_count: int
    action: str  # "downsample" | "augment" | "keep"


@dataclass(frozen=True)
class RebalancePlan:
    classes: tuple[ClassPlan, ...]
    seed: int

    def by_label(self) -> dict[int, ClassPlan]:
        return {c.label: c for c in self.classes}

    @property
    def total_target(self) -> int:
        return sum(c.target_count for c in self.classes)


def build_rebalance_plan(class_counts: dict[int, int], targets: dict[int, int], seed: int) -> RebalancePlan:
    """Decide per-class actions. Augmentation may add at most 300% new
    copies, i.e. target <= 4x original."""
    plans = []
    for label in sorted(targets):
        if label not in class_counts or class_counts[label] <= 0:
            raise PlanMismatch(f"class {label} has no items to rebalance")
        original = class_counts[label]
        target = targets[label]
        if target < original:
            action = "downsample"
        elif target > original:
            if target > 4 * original:
                raise CapExceeded(label, target, original)
            action = "augment"
        else:
            action = "keep"
        plans.append(ClassPlan(label=label, original_count=original, target_count=target, action=action))
    return RebalancePlan(classes=tuple(plans), seed=seed)


@dataclass(frozen=True)
class Provenance:
    original_id: str
    class_label: int
    op: str  # "original" | "augmented"
    spec: AugmentationSpec | None = None

    def as_dict(self) -> dict:
        return {
            "original_id": self.original_id,
            "class": self.class_label,
            "op": self.op,
            "spec": self.spec.as_dict() if self.spec else None,
        }


def apply_rebalance(
    plan: RebalancePlan,
    items: dict[int, list[tuple[RasterImage, GroundTruthReport]]],
    ids: dict[int, list[str]] | None = None,
) -> list[tuple[RasterImage, GroundTruthReport, Provenance]]:
    """Execute the plan.

    Downsampling is seeded sampling without replacement. Augmentation keeps
    every original and cycles them for the extra copies: the first extra
    copy of an original is a flip, later copies are flip+scale, and class 5
    additionally gets translation. RNG streams are split per class, so
    per-class outputs do not depend on the other classes.
    """
    by_label = plan.by_label()
    if set(by_label) != set(items):
        raise PlanMismatch(f"plan covers classes {sorted(by_label)}, items cover {sorted(items)}")
    out: list[tuple[RasterImage, GroundTruthReport, Provenance]] = []
    for label in sorted(by_label):
        cplan = by_label[label]
        group = items[label]
        if len(group) != cplan.original_count:
            raise PlanMismatch(
                f"class {label}: plan expects {cplan.original_count} items, got {len(group)}"
            )
        group_ids = (ids or {}).get(label) or [f"{label}-{i:05d}" for i in range(len(group))]
        if len(group_ids) != len(group):
            raise PlanMismatch(f"class {label}: ids and items disagree in length")
        rng = np.random.default_rng([plan.seed, label])
        if cplan.action == "downsample":
            chosen = np.sort(rng.choice(len(group), size=cplan.target_count, replace=False))
            for i in chosen:
                img, report = group[i]
                out.append((img, report, Provenance(group_ids[i], label, "original")))
            continue
        for i, (img, report) in enumerate(group):
            out.append((img, report, Provenance(group_ids[i], label, "original")))
        extras = cplan.target_count - cplan.original_count
        for j in range(extras):
            src = j % len(group)
            copy_round = j // len(group) + 1
            scale = 1.0 if copy_round == 1 else float(rng.uniform(0.9, 1.1))
            translate = (0.0, 0.0)
            if label == 5:
                translate = (float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05)))
            spec = AugmentationSpec(
                flip_horizontal=True, scale=scale, translate=translate, seed=plan.seed
            )
            img, report = group[src]
            aug_img, aug_report = augment(img, report, spec)
            out.append((aug_img, aug_report, Provenance(group_ids[src], label, "augmented", spec)))
    return out


def write_rebalanced(
    results: list[tuple[RasterImage, GroundTruthReport, Provenance]],
    out_dir: str | Path,
    manifest_name: str = "rebalance_manifest.jsonl",
) -> Path:
    """Write output PNGs plus a provenance manifest, one JSONL line per item.

    Each line carries the provenance fields, the output path, and the full
    report dict so downstream training can consume the manifest alone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / manifest_name
    with manifest_path.open("w", encoding="utf-8") as fh:
        for seq, (img, report, prov) in enumerate(results):
            name = f"case_{prov.class_label}_{seq:05d}.png"
            img.save(out_dir / name)
            line = prov.as_dict()
            line["output"] = name
            line["report"] = report.as_dict(image_id=name)
            fh.write(json.dumps(line) + "\n")
    return manifest_path
