"""Procedural street scenes rendered by casting one ray per range-image pixel.

Geometry is a ground plane, optional street walls, and placed objects (cars,
pedestrians, trucks, barriers) as yawed cuboids or vertical cylinders. Each
pixel's ray keeps the nearest surface hit, so the emitted cloud projects back
with zero pixel collisions. Weather and time of day perturb returns: rain
drops points and jitters depth along the ray, night scales intensity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .annotate import Box3D, SceneMeta
from .rangemap import SensorConfig, pixel_angles

DEFAULT_INTENSITY = {
    "ground": 0.2, "car": 0.6, "pedestrian": 0.4, "wall": 0.3,
    "truck": 0.55, "barrier": 0.35,
}

# footprint sizes (length, width, height) with jitter fractions
_OBJECT_SIZES = {
    "car": ((4.5, 1.8, 1.5), 0.1),
    "truck": ((8.0, 2.5, 3.0), 0.1),
    "barrier": ((3.0, 0.4, 0.9), 0.1),
}
_PED_RADIUS, _PED_HEIGHT = 0.35, 1.7


@dataclass
class SceneSpec:
    """Counts, placement ranges, and environment knobs for one scene."""

    n_cars: int = 1
    n_pedestrians: int = 0
    n_trucks: int = 0
    n_barriers: int = 0
    weather: str = "sunny"
    time: str = "day"
    sensor_height: float = 1.8
    street_halfwidth: float = 12.0
    walls: bool = True
    x_range: tuple[float, float] = (6.0, 40.0)
    intensity: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITY))
    intensity_noise: float = 0.05
    rain_drop_prob: float = 0.15
    rain_depth_sigma: float = 0.03
    night_intensity_factor: float = 0.7


@dataclass
class SceneRecord:
    """One synthetic scene: cloud, per-point surface labels, boxes, metadata."""

    points: np.ndarray            # (N, 4) float32
    labels: np.ndarray            # (N,) int16, index into label_names
    label_names: tuple[str, ...]
    boxes: list[Box3D]
    meta: SceneMeta


def _ray_plane(dirs: np.ndarray, z0: float) -> np.ndarray:
    """Hit distances to the horizontal plane z = z0; inf where the ray misses."""
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dz < 0, z0 / dz, np.inf)
    return np.where(t > 0, t, np.inf)


def _ray_cuboid(dirs: np.ndarray, center, size, yaw: float) -> np.ndarray:
    """Slab-test distances to a yawed upright box centered at `center`."""
    c, s = math.cos(-yaw), math.sin(-yaw)
    ox = -center[0]; oy = -center[1]; oz = -center[2]  # origin in box frame
    lox = c * ox - s * oy
    loy = s * ox + c * oy
    ldx = c * dirs[:, 0] - s * dirs[:, 1]
    ldy = s * dirs[:, 0] + c * dirs[:, 1]
    ldz = dirs[:, 2]
    half = np.array(size) / 2.0

    t_near = np.full(len(dirs), -np.inf)
    t_far = np.full(len(dirs), np.inf)
    for o, d, h in ((lox, ldx, half[0]), (loy, ldy, half[1]), (oz, ldz, half[2])):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        parallel = d == 0
        inside = np.abs(o) <= h
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit = (t_near <= t_far) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)  # inside the box: exit face
    return np.where(hit & (t > 0), t, np.inf)


def _ray_cylinder(dirs: np.ndarray, cx: float, cy: float,
                  z_lo: float, z_hi: float, radius: float) -> np.ndarray:
    """Distances to a vertical cylinder's lateral surface or top cap."""
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = -2.0 * (dx * cx + dy * cy)
    cc = cx * cx + cy * cy - radius * radius
    disc = b * b - 4 * a * cc
    best = np.full(len(dirs), np.inf)
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(ok, (-b + sign * sq) / (2 * a), np.inf)
        z = t * dz
        good = ok & (t > 0) & (z >= z_lo) & (z <= z_hi)
        best = np.where(good & (t < best), t, best)
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = np.where(dz != 0, z_hi / dz, np.inf)
    r2 = (t_cap * dx - cx) ** 2 + (t_cap * dy - cy) ** 2
    good = (t_cap > 0) & (r2 <= radius * radius)
    return np.where(good & (t_cap < best), t_cap, best)


def _no_conflict(x, y, rad, placed) -> bool:
    return all((x - px) ** 2 + (y - py) ** 2 > (rad + pr) ** 2 for px, py, pr in placed)


def _place_objects(rng: np.random.Generator, spec: SceneSpec) -> list[Box3D]:
    """Sample non-overlapping footprints; deterministic draw order per class."""
    ground_z = -spec.sensor_height
    y_lim = spec.street_halfwidth - 1.5
    placed: list[tuple[float, float, float]] = []
    boxes: list[Box3D] = []

    def sample(cls: str, count: int):
        for _ in range(count):
            if cls == "pedestrian":
                size = (2 * _PED_RADIUS, 2 * _PED_RADIUS, _PED_HEIGHT)
            else:
                base, jit = _OBJECT_SIZES[cls]
                size = tuple(b * (1.0 + jit * rng.uniform(-1, 1)) for b in base)
            rad = 0.5 * math.hypot(size[0], size[1])
            for _ in range(200):
                x = rng.uniform(*spec.x_range)
                y = rng.uniform(-y_lim, y_lim)
                if _no_conflict(x, y, rad, placed):
                    break
            else:
                raise RuntimeError(f"could not place {cls} without overlap")
            yaw = float(rng.uniform(0, 2 * np.pi)) if cls in ("car", "truck") else 0.0
            placed.append((x, y, rad))
            boxes.append(Box3D(center=(x, y, ground_z + size[2] / 2),
                               size=size, yaw=yaw, class_name=cls))

    sample("car", spec.n_cars)
    sample("pedestrian", spec.n_pedestrians)
    sample("truck", spec.n_trucks)
    sample("barrier", spec.n_barriers)
    return boxes


def generate_scene(config: SensorConfig, spec: SceneSpec, seed: int) -> SceneRecord:
    """Raycast one scene; fixed seed gives identical bytes."""
    rng = np.random.default_rng(seed)
    boxes = _place_objects(rng, spec)
    meta = SceneMeta(weather=spec.weather, time=spec.time)

    psi, phi = pixel_angles(config)
    PSI, PHI = np.meshgrid(psi, phi)
    dirs = np.stack([np.cos(PHI) * np.cos(PSI),
                     np.cos(PHI) * np.sin(PSI),
                     np.sin(PHI)], axis=-1).reshape(-1, 3)

    ground_z = -spec.sensor_height
    surfaces: list[tuple[np.ndarray, str]] = [(_ray_plane(dirs, ground_z), "ground")]
    if spec.walls:
        wall_len = 2.0 * (config.depth_max + 10.0)
        for side in (-1.0, 1.0):
            center = (0.0, side * spec.street_halfwidth, ground_z + 2.0)
            surfaces.append((_ray_cuboid(dirs, center, (wall_len, 0.4, 4.0), 0.0), "wall"))
    for box in boxes:
        if box.class_name == "pedestrian":
            t = _ray_cylinder(dirs, box.center[0], box.center[1],
                              ground_z, ground_z + _PED_HEIGHT, box.size[0] / 2.0)
        else:
            t = _ray_cuboid(dirs, box.center, box.size, box.yaw)
        surfaces.append((t, box.class_name))

    all_t = np.stack([t for t, _ in surfaces])
    hit_idx = np.argmin(all_t, axis=0)
    depth = all_t[hit_idx, np.arange(len(dirs))]
    keep = np.isfinite(depth) & (depth >= config.depth_min) & (depth <= config.depth_max)

    label_names = tuple(dict.fromkeys(name for _, name in surfaces))
    name_to_id = {n: i for i, n in enumerate(label_names)}
    surf_labels = np.array([name_to_id[name] for _, name in surfaces])

    depth = depth[keep]
    hit_dirs = dirs[keep]
    labels = surf_labels[hit_idx[keep]].astype(np.int16)

    base = np.array([spec.intensity[n] for n in label_names])[labels]
    inten = base + rng.uniform(-spec.intensity_noise, spec.intensity_noise, size=len(depth))
    if spec.weather == "rainy":
        drop = rng.uniform(size=len(depth)) < spec.rain_drop_prob
        jitter = rng.normal(0.0, spec.rain_depth_sigma, size=len(depth))
        depth = np.maximum(depth + jitter, config.depth_min)
        depth, hit_dirs, labels, inten = (depth[~drop], hit_dirs[~drop],
                                          labels[~drop], inten[~drop])
    if spec.time == "night":
        inten = inten * spec.night_intensity_factor
    inten = np.clip(inten, 0.0, 1.0)

    points = np.concatenate([depth[:, None] * hit_dirs, inten[:, None]], axis=1)
    return SceneRecord(points=points.astype(np.float32), labels=labels,
                       label_names=label_names, boxes=boxes, meta=meta)


def randomize_spec(rng: np.random.Generator, base: SceneSpec | None = None) -> SceneSpec:
    """Draw a scene spec with varied counts and environment for corpus synthesis."""
    base = base or SceneSpec()
    counts = {
        "n_cars": int(rng.integers(0, 8)),
        "n_pedestrians": int(rng.integers(0, 3)),
        "n_trucks": int(rng.integers(0, 2)),
        "n_barriers": int(rng.integers(0, 2)),
    }
    weather = "rainy" if rng.uniform() < 0.3 else "sunny"
    time = "night" if rng.uniform() < 0.3 else "day"
    return SceneSpec(**counts, weather=weather, time=time,
                     sensor_height=base.sensor_height,
                     street_halfwidth=base.street_halfwidth, walls=base.walls,
                     x_range=base.x_range, intensity=dict(base.intensity),
                     intensity_noise=base.intensity_noise,
                     rain_drop_prob=base.rain_drop_prob,
                     rain_depth_sigma=base.rain_depth_sigma,
                     night_intensity_factor=base.night_intensity_factor)
