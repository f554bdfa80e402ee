"""
Procedural multi-view dataset synthesis.

Builds labelled objects from six primitive families, poses them according to
a regime (aligned / rotated / arbitrary), picks viewpoints (fixed ring,
uniform random, or furthest-point) and renders each view with ``renderer``.
Everything is a pure function of its arguments and seed.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import REGIMES, SAMPLERS, Config
from exceptions import ConfigurationError, UsageError
from renderer import composite_sphere_offset, render_view

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("sphere", "box", "cylinder", "cone", "torus", "composite")
IDENTITY_POSE = (1.0, 0.0, 0.0, 0.0)
MAX_VIEWS = 20

# Per-class size ranges; class k uses SHAPE_KINDS[k]
CLASS_SIZE_RANGES: Dict[str, List[Tuple[float, float]]] = {
    "sphere": [(0.5, 1.0)],                                   # radius
    "box": [(0.35, 0.9), (0.35, 0.9), (0.35, 0.9)],          # half extents
    "cylinder": [(0.3, 0.7), (0.4, 0.9)],                     # radius, half height
    "cone": [(0.4, 0.8), (0.4, 0.8)],                         # base radius, half height
    "torus": [(0.5, 0.8), (0.12, 0.3)],                       # major, minor radius
    "composite": [(0.3, 0.6), (0.2, 0.45)],                   # cube half edge, sphere radius
}

RING_VIEWS = 12
RING_ELEVATION_DEG = 30.0


class Shape(BaseModel):
    """One procedural object: primitive family, size parameters and pose"""

    model_config = ConfigDict(frozen=True)

    class_id: int = Field(ge=0)
    kind: str
    sizes: Tuple[float, ...]
    pose: Tuple[float, float, float, float] = IDENTITY_POSE

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, kind: str) -> str:
        if kind not in SHAPE_KINDS:
            raise ValueError(f"unknown primitive kind '{kind}'")
        return kind

    @model_validator(mode="after")
    def _check(self):
        expected = len(CLASS_SIZE_RANGES[self.kind])
        if len(self.sizes) != expected:
            raise ValueError(f"{self.kind} takes {expected} size parameters, got {len(self.sizes)}")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("size parameters must be strictly positive")
        if abs(float(np.linalg.norm(self.pose)) - 1.0) > 1e-9:
            raise ValueError("pose quaternion must have unit norm")
        return self

    def bounding_radius(self) -> float:
        """Radius of an origin-centred ball containing the shape (pose-independent)"""
        s = self.sizes
        if self.kind == "sphere":
            return s[0]
        if self.kind == "box":
            return float(np.linalg.norm(s))
        if self.kind in ("cylinder", "cone"):
            return float(np.hypot(s[0], s[1]))
        if self.kind == "torus":
            return s[0] + s[1]
        return max(float(np.sqrt(3.0)) * s[0], composite_sphere_offset(s[0], s[1]) + s[1])


class MultiViewSample(BaseModel):
    """One object as v rendered views with their viewpoints and class label"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    views: np.ndarray
    viewpoints: np.ndarray
    label: int = Field(ge=0)

    @model_validator(mode="after")
    def _check(self):
        views, viewpoints = self.views, self.viewpoints
        if views.ndim != 3 or views.shape[1] != views.shape[2]:
            raise ValueError(f"views must be (v, R, R), got {views.shape}")
        if not 1 <= views.shape[0] <= MAX_VIEWS:
            raise ValueError(f"view count must lie in [1, {MAX_VIEWS}], got {views.shape[0]}")
        if viewpoints.shape != (views.shape[0], 3):
            raise ValueError(f"viewpoints must be ({views.shape[0]}, 3), got {viewpoints.shape}")
        if np.any(np.abs(np.linalg.norm(viewpoints, axis=1) - 1.0) > 1e-9):
            raise ValueError("every viewpoint must have unit norm")
        if views.min() < 0.0 or views.max() > 1.0:
            raise ValueError("view pixels must lie in [0, 1]")
        return self

    @property
    def v(self) -> int:
        return int(self.views.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.views.shape[1])


class MultiViewDataset(BaseModel):
    """In-memory form of a dataset file"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    num_classes: int = Field(ge=1)
    resolution: int = Field(ge=1)
    samples: List[MultiViewSample]
    version: int = Config.DATASET_FORMAT_VERSION

    @model_validator(mode="after")
    def _check(self):
        for i, sample in enumerate(self.samples):
            if sample.label >= self.num_classes:
                raise ValueError(f"sample {i}: label {sample.label} outside [0, {self.num_classes})")
            if sample.resolution != self.resolution:
                raise ValueError(f"sample {i}: resolution {sample.resolution} != {self.resolution}")
        return self

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# shapes and poses
# ---------------------------------------------------------------------------

def generate_shape(class_id: int, seed: int, num_classes: int = len(SHAPE_KINDS)) -> Shape:
    """Deterministic shape of class ``class_id`` with sizes drawn from its range"""
    if not 0 <= class_id < min(num_classes, len(SHAPE_KINDS)):
        raise UsageError(f"Unknown class {class_id} (valid: 0..{min(num_classes, len(SHAPE_KINDS)) - 1})")
    kind = SHAPE_KINDS[class_id]
    rng = np.random.default_rng([int(seed), class_id])
    sizes = tuple(float(rng.uniform(lo, hi)) for lo, hi in CLASS_SIZE_RANGES[kind])
    return Shape(class_id=class_id, kind=kind, sizes=sizes)


def random_rotation(seed: int) -> Tuple[float, float, float, float]:
    """Uniformly distributed rotation on SO(3) as a unit quaternion (normalised 4-d Gaussian)"""
    rng = np.random.default_rng(seed)
    while True:
        q = rng.standard_normal(4)
        norm = np.linalg.norm(q)
        if norm > 1e-12:
            q = q / norm
            return tuple(float(c) for c in q)


def apply_pose_regime(shape: Shape, regime: str, seed: int) -> Shape:
    if regime == "aligned":
        pose = IDENTITY_POSE
    elif regime == "rotated":
        pose = random_rotation(seed)
    else:
        raise UsageError(f"Unknown pose regime '{regime}' (expected 'aligned' or 'rotated')")
    return shape.model_copy(update={"pose": pose})


# ---------------------------------------------------------------------------
# viewpoints
# ---------------------------------------------------------------------------

def sample_viewpoints_random(n: int, seed: int) -> np.ndarray:
    """n i.i.d. uniform unit vectors (normalised Gaussian triples)"""
    if n < 1:
        raise UsageError(f"Need at least one viewpoint, got n={n}")
    rng = np.random.default_rng(seed)
    points = rng.standard_normal((n, 3))
    norms = np.linalg.norm(points, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        points[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(points, axis=1)
    return points / norms[:, None]


def geodesic_distances(candidates: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(candidates @ anchor, -1.0, 1.0))


def fps_indices(candidates: np.ndarray, n: int, start_index: int = 0) -> List[int]:
    """Greedy furthest-point order on the sphere; ties go to the lowest index"""
    candidates = np.asarray(candidates, dtype=np.float64)
    if not 1 <= n <= len(candidates):
        raise UsageError(f"Cannot pick {n} viewpoints from {len(candidates)} candidates")
    if not 0 <= start_index < len(candidates):
        raise UsageError(f"start_index {start_index} outside candidate set")
    chosen = [start_index]
    nearest = geodesic_distances(candidates, candidates[start_index])
    nearest[start_index] = -np.inf
    while len(chosen) < n:
        best = int(np.argmax(nearest))
        chosen.append(best)
        nearest = np.minimum(nearest, geodesic_distances(candidates, candidates[best]))
        nearest[chosen] = -np.inf
    return chosen


def sample_viewpoints_fps(candidates: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.float64)
    return candidates[fps_indices(candidates, n, start_index)]


def ring_viewpoints(count: int = RING_VIEWS, elevation_deg: float = RING_ELEVATION_DEG) -> np.ndarray:
    """Equally spaced viewpoints on one circle of constant elevation"""
    elevation = np.radians(elevation_deg)
    azimuths = 2.0 * np.pi * np.arange(count) / count
    ring = np.stack([np.cos(elevation) * np.cos(azimuths),
                     np.cos(elevation) * np.sin(azimuths),
                     np.full(count, np.sin(elevation))], axis=1)
    return ring / np.linalg.norm(ring, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _erase_rectangle(rng: np.random.Generator, height: int, width: int,
                     attempts: int = 10) -> Optional[Tuple[int, int, int, int]]:
    for _ in range(attempts):
        area = rng.uniform(0.02, 0.2) * height * width
        aspect = rng.uniform(0.3, 3.3)
        h = int(round(np.sqrt(area * aspect)))
        w = int(round(np.sqrt(area / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return None


def augment(image: np.ndarray, seed: Union[int, Sequence[int]], flip_prob: float = 0.5,
            erase_prob: float = 0.5,
            force_flip: Optional[bool] = None,
            force_erase: Optional[Tuple[int, int, int, int]] = None) -> np.ndarray:
    """Random horizontal flip and random rectangular erase (fill 0), deterministic per seed.

    ``force_flip`` / ``force_erase`` (top, left, height, width) override the
    random draws.
    """
    rng = np.random.default_rng(seed)
    flip = rng.random() < flip_prob
    erase = rng.random() < erase_prob
    if force_flip is not None:
        flip = force_flip
    out = image[:, ::-1].copy() if flip else image.copy()
    rect = force_erase if force_erase is not None else (_erase_rectangle(rng, *image.shape) if erase else None)
    if rect is not None:
        top, left, h, w = rect
        out[top:top + h, left:left + w] = 0
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def render_sample(shape: Shape, viewpoints: np.ndarray, resolution: int) -> MultiViewSample:
    views = np.stack([render_view(shape, vp, resolution) for vp in viewpoints])
    return MultiViewSample(views=views, viewpoints=np.asarray(viewpoints, dtype=np.float64),
                           label=shape.class_id)


def restrict_views(sample: MultiViewSample, v: int) -> MultiViewSample:
    """Keep the first ``v`` views (and viewpoints) of a sample"""
    if not 1 <= v <= sample.v:
        raise UsageError(f"Cannot keep {v} of {sample.v} views")
    return MultiViewSample(views=sample.views[:v], viewpoints=sample.viewpoints[:v], label=sample.label)


def build_sample(regime: str, class_id: int, index: int, resolution: int, seed: int,
                 sampler: str = "random", min_views: int = 10, max_views: int = 20,
                 fps_pool: int = 256) -> MultiViewSample:
    rng = np.random.default_rng([int(seed), class_id, index])
    shape_seed, pose_seed, view_seed = (int(s) for s in rng.integers(0, 2 ** 31, size=3))
    shape = generate_shape(class_id, shape_seed)
    if regime == "aligned":
        shape = apply_pose_regime(shape, "aligned", pose_seed)
        viewpoints = ring_viewpoints()
    elif regime == "rotated":
        shape = apply_pose_regime(shape, "rotated", pose_seed)
        viewpoints = ring_viewpoints()
    else:
        shape = apply_pose_regime(shape, "rotated", pose_seed)
        v = int(rng.integers(min_views, max_views + 1))
        if sampler == "fps":
            pool = sample_viewpoints_random(max(fps_pool, v), view_seed)
            viewpoints = sample_viewpoints_fps(pool, v, 0)
        else:
            viewpoints = sample_viewpoints_random(v, view_seed)
    return render_sample(shape, viewpoints, resolution)


def build_dataset(regime: str, counts: Union[int, Sequence[int]], num_classes: int = len(SHAPE_KINDS),
                  resolution: int = 32, seed: int = 0, sampler: str = "random",
                  min_views: int = 10, max_views: int = 20, fps_pool: int = 256) -> MultiViewDataset:
    """Render ``counts`` objects per class under a pose/viewpoint regime"""
    if regime not in REGIMES:
        raise UsageError(f"Unknown regime '{regime}', expected one of {REGIMES}")
    if sampler not in SAMPLERS:
        raise UsageError(f"Unknown sampler '{sampler}', expected one of {SAMPLERS}")
    if not 1 <= num_classes <= len(SHAPE_KINDS):
        raise UsageError(f"num_classes must lie in [1, {len(SHAPE_KINDS)}], got {num_classes}")
    per_class = [int(counts)] * num_classes if np.isscalar(counts) else [int(c) for c in counts]
    if len(per_class) != num_classes or min(per_class) < 1:
        raise UsageError(f"Need a count >= 1 for each of {num_classes} classes, got {per_class}")
    if regime == "arbitrary" and not 10 <= min_views <= max_views <= MAX_VIEWS:
        raise ConfigurationError(f"Arbitrary regime needs 10 <= min_views <= max_views <= 20, "
                                 f"got [{min_views}, {max_views}]")

    samples = []
    for index in range(max(per_class)):
        for class_id in range(num_classes):
            if index < per_class[class_id]:
                samples.append(build_sample(regime, class_id, index, resolution, seed, sampler,
                                            min_views, max_views, fps_pool))
    logger.info(f"Built {regime} dataset ({sampler} sampler): {len(samples)} samples, "
                f"K={num_classes}, R={resolution}")
    return MultiViewDataset(num_classes=num_classes, resolution=resolution, samples=samples)
