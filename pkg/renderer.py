"""
Orthographic depth renderer for procedural shapes.

Shapes are described by exact signed-distance functions in their own frame;
the renderer rotates sample points into that frame, sphere-traces one ray per
pixel and encodes the hit depth as brightness (near = 1, far = 0.1, miss = 0).
"""

import logging
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from exceptions import UsageError

logger = logging.getLogger(__name__)

# Orthographic window half-width in world units; every generated shape fits inside
VIEW_HALF_EXTENT = 2.0
MAX_STEPS = 128
HIT_TOLERANCE = 1e-4
CAMERA_DISTANCE_FACTOR = 3.0


def quaternion_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)"""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sdf_sphere(p: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(p, axis=-1) - radius


def sdf_box(p: np.ndarray, half: Sequence[float]) -> np.ndarray:
    q = np.abs(p) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sdf_cylinder(p: np.ndarray, radius: float, half_height: float) -> np.ndarray:
    dr = np.hypot(p[:, 0], p[:, 1]) - radius
    dz = np.abs(p[:, 2]) - half_height
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    return inside + np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))


def sdf_cone(p: np.ndarray, radius: float, half_height: float) -> np.ndarray:
    """Capped cone along z: base disc of ``radius`` at z=-h, apex at z=+h"""
    qx = np.hypot(p[:, 0], p[:, 1])
    qy = p[:, 2]
    h = half_height
    k2x, k2y = -radius, 2.0 * h
    ca_x = qx - np.minimum(qx, np.where(qy < 0.0, radius, 0.0))
    ca_y = np.abs(qy) - h
    along = np.clip(((0.0 - qx) * k2x + (h - qy) * k2y) / (k2x * k2x + k2y * k2y), 0.0, 1.0)
    cb_x = qx + k2x * along
    cb_y = qy - h + k2y * along
    sign = np.where((cb_x < 0.0) & (ca_y < 0.0), -1.0, 1.0)
    return sign * np.sqrt(np.minimum(ca_x ** 2 + ca_y ** 2, cb_x ** 2 + cb_y ** 2))


def sdf_torus(p: np.ndarray, major: float, minor: float) -> np.ndarray:
    ring = np.hypot(p[:, 0], p[:, 1]) - major
    return np.hypot(ring, p[:, 2]) - minor


def composite_sphere_offset(half_edge: float, radius: float) -> float:
    """Height of the sphere centre above the cube centre in the composite shape"""
    return half_edge + 0.8 * radius


def sdf_composite(p: np.ndarray, half_edge: float, radius: float) -> np.ndarray:
    """Cube with a sphere resting on its top face (union)"""
    top = p - np.array([0.0, 0.0, composite_sphere_offset(half_edge, radius)])
    return np.minimum(sdf_box(p, (half_edge, half_edge, half_edge)), sdf_sphere(top, radius))


PRIMITIVE_SDF: Dict[str, Callable[..., np.ndarray]] = {
    "sphere": lambda p, s: sdf_sphere(p, s[0]),
    "box": lambda p, s: sdf_box(p, s),
    "cylinder": lambda p, s: sdf_cylinder(p, s[0], s[1]),
    "cone": lambda p, s: sdf_cone(p, s[0], s[1]),
    "torus": lambda p, s: sdf_torus(p, s[0], s[1]),
    "composite": lambda p, s: sdf_composite(p, s[0], s[1]),
}


def signed_distance(shape, points: np.ndarray) -> np.ndarray:
    """SDF of a posed shape at world-space points (n, 3)"""
    rotation = quaternion_to_matrix(shape.pose)
    local = points @ rotation  # row-vector form of Rᵀ·p
    return PRIMITIVE_SDF[shape.kind](local, shape.sizes)


def camera_frame(viewpoint: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(right, up, forward) for a camera on ``viewpoint`` looking at the origin"""
    forward = -np.asarray(viewpoint, dtype=np.float64)
    world_up = np.array([0.0, 0.0, 1.0]) if abs(viewpoint[2]) < 0.999 else np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return right, up, forward


def render_view(shape, viewpoint: Sequence[float], resolution: int,
                half_extent: float = VIEW_HALF_EXTENT) -> np.ndarray:
    """Render a resolution×resolution float32 depth image of ``shape`` seen from ``viewpoint``"""
    viewpoint = np.asarray(viewpoint, dtype=np.float64)
    if viewpoint.shape != (3,) or abs(np.linalg.norm(viewpoint) - 1.0) > 1e-9:
        raise UsageError(f"viewpoint must be a unit 3-vector, got {viewpoint}")

    bound = 1.05 * shape.bounding_radius()
    distance = CAMERA_DISTANCE_FACTOR * bound
    t_near, t_far = distance - bound, distance + bound
    right, up, forward = camera_frame(viewpoint)

    centres = ((np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0) * half_extent
    u = np.tile(centres, resolution)                 # column coordinate
    v = np.repeat(centres[::-1], resolution)         # row coordinate, top row first
    origins = distance * viewpoint + u[:, None] * right + v[:, None] * up

    t = np.full(resolution * resolution, t_near)
    hit = np.zeros(resolution * resolution, dtype=bool)
    active = np.ones(resolution * resolution, dtype=bool)
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = signed_distance(shape, origins[idx] + t[idx, None] * forward)
        landed = d < HIT_TOLERANCE
        hit[idx[landed]] = True
        t[idx] += np.where(landed, 0.0, d)
        active[idx] = ~landed & (t[idx] <= t_far)

    depth = np.where(hit, 1.0 - 0.9 * (t - t_near) / (t_far - t_near), 0.0)
    image = np.clip(depth, 0.0, 1.0).reshape(resolution, resolution)
    return image.astype(np.float32)


def silhouette_area(image: np.ndarray) -> int:
    """Number of object (non-background) pixels"""
    return int(np.count_nonzero(image > 0))
