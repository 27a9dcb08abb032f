"""Procedural face world: glyph renderer, quality oracle, detector, corpus.

Scenes are grayscale grids containing 1-4 circular face glyphs (disk, ring
outline, two eyes, mouth arc) over a smooth textured background. The
generator knows exact face geometry, the oracle scores geometric conformity
of a region, and the detector recovers regions by multi-scale template
matching. Together they replace the natural-image corpus, human judgment,
and the external face detector at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from . import images
from .rngs import stream

FACE_FILL = 0.88
INK = 0.10
BG_BASE = 0.42

# Logistic calibration of the oracle's raw conformity score; fixed by the
# calibration script so pristine renders exceed 0.95 and noise stays below 0.2.
ORACLE_GAIN = 13.0
ORACLE_MID = 0.575

DETECTOR_RADII = (3.0, 4.0, 5.0, 6.0, 7.5, 9.0, 11.0, 13.0)
DETECTOR_THRESHOLD = 0.52
DETECTOR_NMS_IOU = 0.3


class SceneSpecError(ValueError):
    """Scene specification violates a geometric invariant."""


@dataclass(frozen=True)
class FaceSpec:
    center: tuple[float, float]  # (x, y) pixels
    radius: float
    eye_offsets: tuple[tuple[float, float], tuple[float, float]] = ((-3.2, -2.56), (3.2, -2.56))
    mouth_curve: float = 0.45
    jitter: float = 0.0

    def __post_init__(self):
        if self.radius < 2.0:
            raise SceneSpecError(f"face radius {self.radius} < 2 px")

    @property
    def extent(self) -> float:
        """Half-side of the glyph's bounding square."""
        return self.radius + _ring_halfwidth(self.radius) + 0.5


@dataclass(frozen=True)
class FaceRegion:
    bbox: tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max), half-open
    confidence: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence outside [0, 1]")

    def clipped(self, h: int, w: int) -> "FaceRegion":
        x0, y0, x1, y1 = self.bbox
        return replace(self, bbox=(max(0, x0), max(0, y0), min(w, x1), min(h, y1)))

    def within(self, h: int, w: int) -> bool:
        x0, y0, x1, y1 = self.bbox
        return 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h


@dataclass(frozen=True)
class SceneSpec:
    size: tuple[int, int] = (32, 32)  # (H, W)
    background: int = 0
    faces: tuple[FaceSpec, ...] = ()
    degrade_seed: int | None = None  # present only for deliberately bad renders

    def validate(self) -> None:
        h, w = self.size
        for f in self.faces:
            if not region_for_face(f, h, w).within(h, w):
                raise SceneSpecError(f"face at {f.center} r={f.radius} exceeds image bounds")
        for i in range(len(self.faces)):
            for j in range(i + 1, len(self.faces)):
                a, b = self.faces[i], self.faces[j]
                d = math.dist(a.center, b.center)
                if d < a.radius + b.radius + 2.0:
                    raise SceneSpecError(f"faces {i} and {j} overlap (centers {d:.1f} px apart)")


def _ring_halfwidth(radius: float) -> float:
    return max(0.55, 0.13 * radius)


def region_for_face(face: FaceSpec, h: int, w: int) -> FaceRegion:
    """Exact half-open bounding box of the glyph.

    The renderer inks pixel (x, y) iff its distance to the center is
    strictly below the extent, so the covered column range is
    (cx - e, cx + e) intersected with the integer grid.
    """
    cx, cy = face.center
    e = face.extent
    return FaceRegion(
        bbox=(
            int(math.floor(cx - e)) + 1,
            int(math.floor(cy - e)) + 1,
            int(math.ceil(cx + e)),
            int(math.ceil(cy + e)),
        )
    ).clipped(h, w)


def canonical_face(cx: float, cy: float, radius: float) -> FaceSpec:
    """Reference glyph geometry used by the oracle template and the detector."""
    return FaceSpec(
        center=(cx, cy),
        radius=radius,
        eye_offsets=((-0.40 * radius, -0.32 * radius), (0.40 * radius, -0.32 * radius)),
        mouth_curve=0.45,
        jitter=0.0,
    )


def _stamp(canvas: np.ndarray, cov: np.ndarray, value: float) -> None:
    canvas *= 1.0 - cov
    canvas += value * cov


def render_face(canvas: np.ndarray, face: FaceSpec, rng: np.random.Generator | None = None) -> None:
    """Draw one glyph in place on a 2-d canvas with antialiased coverage."""
    h, w = canvas.shape
    cx, cy = face.center
    r = face.radius
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.hypot(xs - cx, ys - cy)

    _stamp(canvas, np.clip(r - d + 0.5, 0.0, 1.0), FACE_FILL)
    hw = _ring_halfwidth(r)
    _stamp(canvas, np.clip(hw + 0.5 - np.abs(d - r), 0.0, 1.0), INK)

    jig = rng if rng is not None else np.random.default_rng(0)
    eye_r = max(0.55, 0.16 * r)
    for dx, dy in face.eye_offsets:
        jx = jig.normal(0.0, face.jitter * 0.22 * r) if face.jitter > 0 else 0.0
        jy = jig.normal(0.0, face.jitter * 0.22 * r) if face.jitter > 0 else 0.0
        de = np.hypot(xs - (cx + dx + jx), ys - (cy + dy + jy))
        _stamp(canvas, np.clip(eye_r - de + 0.5, 0.0, 1.0), INK)

    curve = face.mouth_curve
    my_shift = jig.normal(0.0, face.jitter * 0.18 * r) if face.jitter > 0 else 0.0
    us = np.linspace(-1.0, 1.0, 25)
    px = cx + 0.52 * r * us
    py = cy + r * (0.40 - 0.20 * curve * (1.0 - us**2)) + my_shift
    dm = np.full((h, w), np.inf)
    for qx, qy in zip(px, py):
        np.minimum(dm, np.hypot(xs - qx, ys - qy), out=dm)
    rm = max(0.5, 0.11 * r)
    _stamp(canvas, np.clip(rm + 0.5 - dm, 0.0, 1.0), INK)


def _background(h: int, w: int, background_id: int) -> np.ndarray:
    rng = stream(background_id, "background")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.full((h, w), BG_BASE)
    for _ in range(3):
        kx, ky = rng.uniform(-2.0, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.01, 0.045)
        field_ += amp * np.cos(2 * np.pi * (kx * xs / w + ky * ys / h) + phase)
    return np.clip(field_, 0.28, 0.58)


def _degrade_region(canvas: np.ndarray, region: FaceRegion, rng: np.random.Generator) -> None:
    """Ruin a rendered face: local blur plus speckle and streaks."""
    x0, y0, x1, y1 = region.bbox
    patch = canvas[y0:y1, x0:x1]
    k = int(rng.integers(1, 3)) * 2 + 1
    patch[:] = cv2.blur(patch, (k, k))
    patch += rng.normal(0.0, 0.08, size=patch.shape)
    for _ in range(int(rng.integers(1, 4))):
        row = int(rng.integers(0, patch.shape[0]))
        patch[row : row + 1, :] = rng.uniform(0.2, 0.8)
    np.clip(patch, 0.0, 1.0, out=patch)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[FaceRegion]]:
    """Render a scene, returning the image and exact ground-truth regions."""
    spec.validate()
    h, w = spec.size
    canvas = _background(h, w, spec.background)
    regions = []
    for face in spec.faces:
        render_face(canvas, face, rng)
        regions.append(region_for_face(face, h, w))
    if spec.degrade_seed is not None:
        drng = stream(spec.degrade_seed, "degrade")
        for region in regions:
            if face_is_degradable(region):
                _degrade_region(canvas, region, drng)
    return images.as_image(np.clip(canvas, 0.0, 1.0)), regions


def face_is_degradable(region: FaceRegion) -> bool:
    x0, y0, x1, y1 = region.bbox
    return (x1 - x0) >= 4 and (y1 - y0) >= 4


def random_scene(rng: np.random.Generator, size: tuple[int, int] = (32, 32), n_faces: int | None = None, degrade: bool = False) -> SceneSpec:
    """Sample a valid scene spec by rejection."""
    h, w = size
    if n_faces is None:
        n_faces = int(rng.integers(1, 5))
    r_max = 0.40 * min(h, w) / (1.0 + 0.55 * (n_faces - 1))
    faces: list[FaceSpec] = []
    pending: list[tuple[float, float, float]] = []
    # restart placement from scratch with a shrinking radius cap; an early
    # large face can otherwise block every later placement
    for restart in range(60):
        pending.clear()
        cap = max(4.35, r_max * (0.93**restart))
        ok = True
        for _ in range(n_faces):
            placed = False
            for _ in range(80):
                r = float(rng.uniform(4.0, cap))
                e = r + _ring_halfwidth(r) + 1.0
                if 2 * e >= min(h, w):
                    continue
                cx = float(rng.uniform(e, w - e - 1e-6))
                cy = float(rng.uniform(e, h - e - 1e-6))
                if any(math.dist((cx, cy), (px, py)) < r + pr + 2.5 for px, py, pr in pending):
                    continue
                pending.append((cx, cy, r))
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            break
    if len(pending) < n_faces:
        raise SceneSpecError(f"could not place {n_faces} faces in {size}")
    for cx, cy, r in pending:
        if degrade:
            # deliberately irrational geometry: asymmetric eyes, wild mouth
            off = rng.uniform(0.15, 0.75, size=4) * r
            sgn = rng.choice([-1.0, 1.0], size=2)
            faces.append(
                FaceSpec(
                    center=(cx, cy),
                    radius=r,
                    eye_offsets=((-off[0], sgn[0] * off[1]), (off[2], sgn[1] * off[3])),
                    mouth_curve=float(rng.uniform(-1.5, 1.5)),
                    jitter=1.0,
                )
            )
            continue
        wob = rng.uniform(0.95, 1.05, size=2)
        curve = float(rng.uniform(0.32, 0.58))
        faces.append(
            FaceSpec(
                center=(cx, cy),
                radius=r,
                eye_offsets=(
                    (-0.40 * r * wob[0], -0.32 * r * wob[1]),
                    (0.40 * r * wob[0], -0.32 * r * wob[1]),
                ),
                mouth_curve=curve,
                jitter=float(rng.uniform(0.0, 0.15)),
            )
        )
    return SceneSpec(
        size=size,
        background=int(rng.integers(0, 2**31)),
        faces=tuple(faces),
        degrade_seed=int(rng.integers(0, 2**31)) if degrade else None,
    )


# ---------------------------------------------------------------------------
# Quality oracle


def _implied_radius(box_h: int, box_w: int) -> float:
    """Invert the extent formula: the radius a canonical glyph would have
    if this box were its exact bounding box."""
    e = (box_h + box_w) / 4.0
    r_large = (e - 0.5) / 1.13  # branch where ring halfwidth = 0.13 r
    if r_large >= 4.231:
        return r_large
    return max(2.0, e - 1.05)


_ORACLE_TEMPLATES: dict[tuple, tuple[np.ndarray, np.ndarray, float, float]] = {}


_ORACLE_SHIFTS = (-0.5, -0.25, 0.0, 0.25, 0.5)
_ORACLE_CURVES = (0.32, 0.45, 0.58)


def _oracle_templates(box_h: int, box_w: int) -> list[tuple[np.ndarray, np.ndarray, float, float]]:
    """Canonical glyphs rendered at the crop's own scale over a grid of
    subpixel center shifts and mouth curvatures (bounding boxes are integer,
    faces are not).

    Each entry is (template, disk mask, center_x, center_y); the mask covers
    the glyph disk so box corners (background, possibly neighbor ink) are
    ignored.
    """
    out = []
    r = _implied_radius(box_h, box_w)
    for dy in _ORACLE_SHIFTS:
        for dx in _ORACLE_SHIFTS:
            for curve in _ORACLE_CURVES:
                key = (box_h, box_w, dx, dy, curve)
                if key not in _ORACLE_TEMPLATES:
                    cx = (box_w - 1) / 2.0 + dx
                    cy = (box_h - 1) / 2.0 + dy
                    canvas = np.full((box_h, box_w), BG_BASE)
                    face = replace(canonical_face(cx, cy, r), mouth_curve=curve)
                    render_face(canvas, face)
                    ys, xs = np.mgrid[0:box_h, 0:box_w].astype(np.float64)
                    mask = np.hypot(xs - cx, ys - cy) <= r + _ring_halfwidth(r) + 0.5
                    _ORACLE_TEMPLATES[key] = (canvas, mask, cx, cy)
                out.append(_ORACLE_TEMPLATES[key])
    return out


def _masked_pearson(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    av = a[mask]
    bv = b[mask]
    ac = av - av.mean()
    bc = bv - bv.mean()
    denom = math.sqrt(float((ac**2).sum()) * float((bc**2).sum()))
    return float((ac * bc).sum()) / denom if denom > 1e-12 else 0.0


def _mirror_columns(crop: np.ndarray, cx: float) -> np.ndarray:
    """Resample the crop mirrored about the vertical axis x = cx."""
    w = crop.shape[1]
    xs = np.clip(2.0 * cx - np.arange(w), 0.0, w - 1.0)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    frac = xs - x0
    return crop[:, x0] * (1.0 - frac) + crop[:, x1] * frac


def quality_oracle(image: np.ndarray, region: FaceRegion) -> float:
    """Geometric conformity of the glyph inside `region`, in [0, 1].

    Correlates the region crop against canonical glyph templates rendered at
    the crop's own scale (maximized over subpixel center shifts, restricted
    to the glyph disk), adds a bilateral-symmetry term about the best
    template axis, and maps the blend through a calibrated logistic. Reads
    only pixels inside the region.
    """
    image = images.as_image(image)
    h, w, _ = image.shape
    if not region.within(h, w):
        raise ValueError(f"region {region.bbox} outside {h}x{w} image")
    x0, y0, x1, y1 = region.bbox
    crop = image[y0:y1, x0:x1, 0]

    corr, best = -1.0, None
    for template, mask, cx, cy in _oracle_templates(crop.shape[0], crop.shape[1]):
        c = _masked_pearson(crop, template, mask)
        if c > corr:
            corr, best = c, (mask, cx)
    mask, cx = best
    sym = _masked_pearson(crop, _mirror_columns(crop, cx), mask)

    raw = 0.75 * max(corr, 0.0) + 0.25 * max(sym, 0.0)
    return 1.0 / (1.0 + math.exp(-ORACLE_GAIN * (raw - ORACLE_MID)))


def sample_quality(image: np.ndarray) -> float:
    """Oracle score of the best detected face, or 0.0 when nothing is found."""
    found = detect_faces(image)
    if not found:
        return 0.0
    return quality_oracle(image, found[0])


# ---------------------------------------------------------------------------
# Detector


def _detector_templates() -> list[tuple[np.ndarray, tuple[int, int, int, int]]]:
    """(template, inset box) pairs; the inset is the canonical face's exact
    region within the template canvas so detections share the ground-truth
    box convention."""
    out = []
    for r in DETECTOR_RADII:
        e = r + _ring_halfwidth(r) + 0.5
        side = int(math.ceil(2 * e)) + 1
        canvas = np.full((side, side), BG_BASE)
        c = (side - 1) / 2.0
        face = canonical_face(c, c, r)
        render_face(canvas, face)
        inset = region_for_face(face, side, side).bbox
        out.append((canvas.astype(np.float32), inset))
    return out


_DETECTOR_CACHE: list[tuple[np.ndarray, tuple[int, int, int, int]]] | None = None


def _iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def detect_faces(image: np.ndarray, threshold: float = DETECTOR_THRESHOLD) -> list[FaceRegion]:
    """Multi-scale normalized cross-correlation detector with NMS.

    Returns regions sorted by confidence descending; an empty list is a
    valid result.
    """
    global _DETECTOR_CACHE
    if _DETECTOR_CACHE is None:
        _DETECTOR_CACHE = _detector_templates()
    image = images.as_image(image)
    gray = image[:, :, 0].astype(np.float32)
    h, w = gray.shape
    candidates: list[tuple[float, tuple[int, int, int, int]]] = []
    for tmpl, inset in _DETECTOR_CACHE:
        side = tmpl.shape[0]
        if side > h or side > w:
            continue
        resp = cv2.matchTemplate(gray, tmpl, cv2.TM_CCOEFF_NORMED)
        ys, xs = np.nonzero(resp >= threshold)
        ix0, iy0, ix1, iy1 = inset
        for y, x in zip(ys.tolist(), xs.tolist()):
            candidates.append((float(resp[y, x]), (x + ix0, y + iy0, x + ix1, y + iy1)))
    candidates.sort(key=lambda c: (-c[0], c[1]))
    kept: list[FaceRegion] = []
    for score, box in candidates:
        if any(_iou(box, k.bbox) > DETECTOR_NMS_IOU for k in kept):
            continue
        kept.append(FaceRegion(bbox=box, confidence=min(max(score, 0.0), 1.0)))
    return kept


# ---------------------------------------------------------------------------
# Corpus


@dataclass(frozen=True)
class SceneRecord:
    path: str
    seed: int
    regions: tuple[tuple[int, int, int, int], ...]
    face_count: int
    condition: str

    def as_row(self) -> dict:
        return {
            "path": self.path,
            "seed": self.seed,
            "regions": [list(b) for b in self.regions],
            "face_count": self.face_count,
            "condition": self.condition,
        }

    @staticmethod
    def from_row(row: dict) -> "SceneRecord":
        return SceneRecord(
            path=row["path"],
            seed=int(row["seed"]),
            regions=tuple(tuple(int(v) for v in b) for b in row["regions"]),
            face_count=int(row["face_count"]),
            condition=row["condition"],
        )


@dataclass
class CorpusConfig:
    n_scenes: int = 400
    size: tuple[int, int] = (32, 32)
    degraded_fraction: float = 0.2
    max_faces: int = 3
    seed: int = 0


def scene_from_seed(seed: int, size: tuple[int, int], degrade: bool, max_faces: int = 3) -> tuple[np.ndarray, list[FaceRegion], str]:
    """Reproduce a corpus image from its recorded seed."""
    rng = stream(seed, "scene")
    n_faces = int(rng.integers(1, max_faces + 1))
    spec = random_scene(rng, size=size, n_faces=n_faces, degrade=degrade)
    image, regions = generate_scene(spec, stream(seed, "render"))
    condition = "degraded" if degrade else f"faces{n_faces}"
    return image, regions, condition


def generate_corpus(out_dir: str, config: CorpusConfig) -> list[SceneRecord]:
    """Render a corpus to PNG files; the manifest row reproduces each image."""
    import os

    records = []
    n_degraded = int(round(config.n_scenes * config.degraded_fraction))
    for i in range(config.n_scenes):
        degrade = i < n_degraded
        seed = stream(config.seed, "corpus", i).integers(0, 2**63 - 1)
        image, regions, condition = scene_from_seed(seed, config.size, degrade, config.max_faces)
        path = os.path.join(out_dir, f"scene_{i:05d}.png")
        images.save_png(path, image)
        records.append(
            SceneRecord(
                path=path,
                seed=int(seed),
                regions=tuple(r.bbox for r in regions),
                face_count=len(regions),
                condition=condition,
            )
        )
    return records
