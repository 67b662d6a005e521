"""Spherical range-map projection between LiDAR point clouds and 2D range images.

A range image stores per-pixel depth and intensity on an H x W grid whose
columns sweep azimuth (full circle) and whose rows sweep pitch from fov_up
(row 0) down to fov_down. Invalid pixels carry depth 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

RANGE_IMAGE_MAGIC = b"RMG1"


@dataclass(frozen=True)
class SensorConfig:
    """Grid geometry and depth gates for one sensor. Angles in degrees."""

    height: int = 32
    width: int = 1024
    fov_up_deg: float = 2.0
    fov_down_deg: float = -25.0
    depth_min: float = 0.5
    depth_max: float = 63.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid must be at least 1x1")
        if not self.fov_up_deg > self.fov_down_deg:
            raise ValueError("fov_up must exceed fov_down")
        if not (0.0 <= self.depth_min < self.depth_max):
            raise ValueError("need 0 <= depth_min < depth_max")

    @property
    def fov_up(self) -> float:
        return float(np.deg2rad(self.fov_up_deg))

    @property
    def fov_down(self) -> float:
        return float(np.deg2rad(self.fov_down_deg))


@dataclass
class RangeImage:
    """Depth/intensity planes plus validity mask; invalid pixels have depth 0."""

    depth: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.depth.shape != self.intensity.shape or self.depth.shape != self.valid.shape:
            raise ValueError("depth, intensity and valid must share one HxW shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class NormalizedImage:
    """(H, W, 2) array in [-1, 1]: channel 0 log-depth, channel 1 intensity."""

    data: np.ndarray
    clamped_count: int = 0

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("normalized image must be (H, W, 2)")


def pixel_angles(config: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center azimuth psi (W,) and pitch phi (H,) in radians.

    psi = pi * (1 - 2*(w + 0.5)/W) runs from +pi (left edge) to -pi;
    phi runs from fov_up (row 0) down to fov_down.
    """
    w = np.arange(config.width, dtype=np.float64)
    h = np.arange(config.height, dtype=np.float64)
    psi = np.pi * (1.0 - 2.0 * (w + 0.5) / config.width)
    phi = config.fov_up - (config.fov_up - config.fov_down) * (h + 0.5) / config.height
    return psi, phi


def project(points: np.ndarray, config: SensorConfig) -> RangeImage:
    """Project an (N, 3) or (N, 4) cloud to a range image, nearest point per pixel.

    Points outside the pitch FoV or the [depth_min, depth_max] gate are dropped.
    Pixel collisions keep the smallest range; ties keep the earliest point.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] not in (3, 4):
        raise ValueError("points must be (N, 3) or (N, 4)")
    if not np.isfinite(pts).all():
        raise ValueError("points contain non-finite coordinates")

    H, W = config.height, config.width
    depth = np.zeros((H, W), dtype=np.float32)
    inten = np.zeros((H, W), dtype=np.float32)
    valid = np.zeros((H, W), dtype=bool)
    if pts.shape[0] == 0:
        return RangeImage(depth, inten, valid)

    xyz = pts[:, :3]
    point_inten = pts[:, 3] if pts.shape[1] == 4 else np.zeros(len(pts))
    r = np.linalg.norm(xyz, axis=1)

    keep = (r > 0) & (r >= config.depth_min) & (r <= config.depth_max)
    with np.errstate(invalid="ignore"):
        pitch = np.arcsin(np.divide(xyz[:, 2], r, out=np.zeros_like(r), where=r > 0))
    keep &= (pitch >= config.fov_down) & (pitch <= config.fov_up)
    if not keep.any():
        return RangeImage(depth, inten, valid)

    xyz, point_inten, r, pitch = xyz[keep], point_inten[keep], r[keep], pitch[keep]
    u = np.floor(0.5 * (1.0 - np.arctan2(xyz[:, 1], xyz[:, 0]) / np.pi) * W).astype(np.int64)
    v = np.floor((1.0 - (pitch - config.fov_down) / (config.fov_up - config.fov_down)) * H).astype(np.int64)
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)

    # write farthest first so the nearest (first-occurring on ties) lands last
    order = np.argsort(r, kind="stable")[::-1]
    depth[v[order], u[order]] = r[order]
    inten[v[order], u[order]] = point_inten[order]
    valid[v[order], u[order]] = True
    return RangeImage(depth, inten, valid)


def unproject(image: RangeImage, config: SensorConfig) -> np.ndarray:
    """Lift valid pixels back to an (N, 4) cloud at pixel-center angles, row-major order."""
    if image.shape != (config.height, config.width):
        raise ValueError("image shape does not match sensor config")
    psi, phi = pixel_angles(config)
    rows, cols = np.nonzero(image.valid)
    r = image.depth[rows, cols].astype(np.float64)
    a, p = psi[cols], phi[rows]
    out = np.empty((len(r), 4), dtype=np.float64)
    out[:, 0] = r * np.cos(p) * np.cos(a)
    out[:, 1] = r * np.cos(p) * np.sin(a)
    out[:, 2] = r * np.sin(p)
    out[:, 3] = image.intensity[rows, cols]
    return out


def normalize(image: RangeImage, config: SensorConfig) -> NormalizedImage:
    """Map depth to [-1, 1] log scale and intensity to [-1, 1]; invalid pixels to -1.

    Valid depths above depth_max are clamped and counted in clamped_count.
    """
    d = image.depth.astype(np.float64)
    over = image.valid & (d > config.depth_max)
    d = np.minimum(d, config.depth_max)
    nd = 2.0 * np.log2(d + 1.0) / np.log2(config.depth_max + 1.0) - 1.0
    ni = 2.0 * image.intensity.astype(np.float64) - 1.0
    nd = np.where(image.valid, nd, -1.0)
    ni = np.where(image.valid, ni, -1.0)
    data = np.stack([nd, ni], axis=-1).astype(np.float32)
    np.clip(data, -1.0, 1.0, out=data)
    return NormalizedImage(data=data, clamped_count=int(over.sum()))


def denormalize(norm: NormalizedImage | np.ndarray, config: SensorConfig) -> RangeImage:
    """Invert normalize; decoded depths below depth_min become invalid pixels."""
    data = norm.data if isinstance(norm, NormalizedImage) else np.asarray(norm)
    if data.ndim != 3 or data.shape[2] != 2:
        raise ValueError("normalized data must be (H, W, 2)")
    nd = data[..., 0].astype(np.float64)
    ni = data[..., 1].astype(np.float64)
    d = np.exp2(0.5 * (nd + 1.0) * np.log2(config.depth_max + 1.0)) - 1.0
    valid = d >= max(config.depth_min, np.finfo(np.float32).tiny)
    depth = np.where(valid, d, 0.0).astype(np.float32)
    inten = np.where(valid, np.clip(0.5 * (ni + 1.0), 0.0, 1.0), 0.0).astype(np.float32)
    return RangeImage(depth=depth, intensity=inten, valid=valid)


def write_point_cloud(path, points: np.ndarray) -> None:
    """Write an (N, 4) cloud as raw little-endian float32, no header."""
    pts = np.asarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError("point cloud file payload must be (N, 4)")
    with open(path, "wb") as f:
        f.write(pts.tobytes())


def read_point_cloud(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 16 != 0:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy()


def write_range_image(path, image: RangeImage) -> None:
    """Write RMG1 format: 16-byte header then depth plane then intensity plane."""
    H, W = image.shape
    depth = np.where(image.valid, image.depth, 0.0).astype("<f4")
    inten = np.where(image.valid, image.intensity, 0.0).astype("<f4")
    with open(path, "wb") as f:
        f.write(RANGE_IMAGE_MAGIC)
        f.write(struct.pack("<III", H, W, 0))
        f.write(depth.tobytes())
        f.write(inten.tobytes())


def read_range_image(path) -> RangeImage:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != RANGE_IMAGE_MAGIC:
            raise ValueError(f"{path}: not a range image file")
        H, W, _ = struct.unpack("<III", header[4:])
        payload = f.read()
    if len(payload) != 2 * H * W * 4:
        raise ValueError(f"{path}: truncated range image payload")
    planes = np.frombuffer(payload, dtype="<f4").reshape(2, H, W)
    depth = planes[0].copy()
    inten = planes[1].copy()
    valid = depth > 0
    inten[~valid] = 0.0
    return RangeImage(depth=depth, intensity=inten, valid=valid)
