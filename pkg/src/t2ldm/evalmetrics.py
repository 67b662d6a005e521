"""Quality and controllability metrics for generated LiDAR clouds.

Distribution metrics compare bird's-eye-view occupancy histograms (JSD between
aggregate tables, squared MMD between per-scene tables). Paired-cloud metrics
(Chamfer, one-directional MSE, EMD) run on jointly min-max normalized
coordinates. A grid clustering detector recovers object footprints for the
caption-vs-detection recall score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .annotate import (
    AnnotationRules,
    Box3D,
    location_text,
    orientation_text,
    quantity_text,
)

EMD_MAX_POINTS = 2048


@dataclass
class BEVHistogram:
    """Normalized bird's-eye-view occupancy table; empty clouds are flagged."""

    table: np.ndarray
    n_points: int
    grid_size: int
    bev_range: float

    @property
    def empty(self) -> bool:
        return self.n_points == 0


def bev_histogram(points: np.ndarray, grid_size: int = 100, bev_range: float = 50.0) -> BEVHistogram:
    """Histogram x-y positions over [-range, range]^2 into grid_size^2 cells."""
    if grid_size < 1 or bev_range <= 0:
        raise ValueError("grid_size >= 1 and bev_range > 0 required")
    pts = np.asarray(points)
    if pts.size == 0:
        table = np.zeros((grid_size, grid_size))
        return BEVHistogram(table, 0, grid_size, bev_range)
    hist, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=grid_size,
                                range=[[-bev_range, bev_range], [-bev_range, bev_range]])
    n = int(hist.sum())
    table = hist / n if n > 0 else hist
    return BEVHistogram(table, n, grid_size, bev_range)


def _as_table(h) -> np.ndarray:
    table = h.table if isinstance(h, BEVHistogram) else np.asarray(h, dtype=np.float64)
    s = table.sum()
    return table / s if s > 0 else table


def jsd(p, q) -> float:
    """Jensen-Shannon divergence, base 2: 0 for identical, 1 for disjoint."""
    P, Q = _as_table(p), _as_table(q)
    if P.shape != Q.shape:
        raise ValueError("histograms must share a shape")
    M = 0.5 * (P + Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_pm = np.where(P > 0, P * np.log2(P / M), 0.0).sum()
        kl_qm = np.where(Q > 0, Q * np.log2(Q / M), 0.0).sum()
    return float(0.5 * kl_pm + 0.5 * kl_qm)


def mmd(set_a, set_b, bandwidth: float | None = None) -> float:
    """Squared MMD (biased V-statistic) with a Gaussian kernel over flattened
    tables; bandwidth defaults to the median pairwise distance heuristic."""
    A = np.stack([_as_table(h).ravel() for h in set_a])
    B = np.stack([_as_table(h).ravel() for h in set_b])
    if A.shape[1] != B.shape[1]:
        raise ValueError("table sizes differ")

    def sq_dists(X, Y):
        xx = (X * X).sum(1)[:, None]
        yy = (Y * Y).sum(1)[None, :]
        return np.maximum(xx + yy - 2.0 * X @ Y.T, 0.0)

    d_aa, d_bb, d_ab = sq_dists(A, A), sq_dists(B, B), sq_dists(A, B)
    if bandwidth is None:
        pooled = np.concatenate([d_aa.ravel(), d_bb.ravel(), d_ab.ravel()])
        med = float(np.median(np.sqrt(pooled)))
        bandwidth = med if med > 0 else 1.0
    g = 1.0 / (2.0 * bandwidth * bandwidth)
    value = (np.exp(-g * d_aa).mean() + np.exp(-g * d_bb).mean()
             - 2.0 * np.exp(-g * d_ab).mean())
    return float(value)


def _joint_minmax(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    both = np.concatenate([a, b])
    lo = both.min(axis=0)
    span = both.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)  # degenerate dims collapse to 0
    return (a - lo) / span, (b - lo) / span


def _min_sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Per-point squared distance from each a to its nearest b."""
    out = np.empty(len(a))
    bb = (b * b).sum(1)
    for i in range(0, len(a), chunk):
        blk = a[i:i + chunk]
        d = (blk * blk).sum(1)[:, None] + bb[None, :] - 2.0 * blk @ b.T
        out[i:i + chunk] = np.maximum(d.min(axis=1), 0.0)
    return out


def upsample_metrics(pred_points: np.ndarray, ref_points: np.ndarray,
                     max_emd_points: int = EMD_MAX_POINTS) -> dict:
    """Chamfer distance, prediction-side MSE, and EMD on jointly [0, 1]^3
    min-max normalized xyz. EMD subsamples both clouds to max_emd_points and
    solves the exact assignment; the subsample is the only approximation."""
    a = np.asarray(pred_points, dtype=np.float64)[:, :3]
    b = np.asarray(ref_points, dtype=np.float64)[:, :3]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both clouds must be nonempty")
    a, b = _joint_minmax(a, b)

    d_ab = _min_sq_dists(a, b)
    d_ba = _min_sq_dists(b, a)
    cd = float(d_ab.mean() + d_ba.mean())
    mse = float(d_ab.mean())

    n = min(len(a), len(b), max_emd_points)
    rng = np.random.default_rng(0)
    sa = a if len(a) == n else a[rng.choice(len(a), n, replace=False)]
    sb = b if len(b) == n else b[rng.choice(len(b), n, replace=False)]
    # direct differences: exact zeros for coincident points, chunked for memory
    cost = np.empty((n, n))
    for i in range(0, n, 256):
        diff = sa[i:i + 256, None, :] - sb[None, :, :]
        cost[i:i + 256] = np.sqrt((diff * diff).sum(-1))
    rows, cols = linear_sum_assignment(cost)
    emd = float(cost[rows, cols].mean())
    return {"cd": cd, "mse": mse, "emd": emd}


@dataclass
class Detection:
    """One cluster footprint from the grid detector."""

    center: tuple[float, float]
    extent: tuple[float, float]  # (larger, smaller) axis-aligned side
    n_points: int
    label: str = "unknown"


def _fit_ground_plane(pts: np.ndarray, margin: float) -> np.ndarray:
    """Least-squares z = ax + by + c on low points, one inlier refit."""
    z = pts[:, 2]
    cand = pts[z <= z.min() + 0.5]
    coef = np.array([0.0, 0.0, float(z.min())])
    for _ in range(2):
        if len(cand) < 3:
            break
        A = np.column_stack([cand[:, 0], cand[:, 1], np.ones(len(cand))])
        coef, *_ = np.linalg.lstsq(A, cand[:, 2], rcond=None)
        resid = np.abs(pts[:, 0] * coef[0] + pts[:, 1] * coef[1] + coef[2] - z)
        cand = pts[resid < margin]
    return coef


def detect_objects(points: np.ndarray, ground_margin: float = 0.3,
                   cell_size: float = 0.5, min_points: int = 10,
                   car_length: tuple[float, float] = (2.5, 6.0),
                   car_width: tuple[float, float] = (1.2, 2.5)) -> list[Detection]:
    """Cluster above-ground points on an x-y grid (8-connectivity) and gate
    cluster footprints into car / unknown."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return []
    coef = _fit_ground_plane(pts, ground_margin)
    plane_z = pts[:, 0] * coef[0] + pts[:, 1] * coef[1] + coef[2]
    above = pts[np.abs(pts[:, 2] - plane_z) > ground_margin]
    if len(above) == 0:
        return []

    ix = np.floor(above[:, 0] / cell_size).astype(np.int64)
    iy = np.floor(above[:, 1] / cell_size).astype(np.int64)
    ox, oy = ix.min(), iy.min()
    grid = np.zeros((ix.max() - ox + 1, iy.max() - oy + 1), dtype=bool)
    grid[ix - ox, iy - oy] = True
    labels, n_clusters = ndimage.label(grid, structure=np.ones((3, 3)))
    point_cluster = labels[ix - ox, iy - oy]

    detections = []
    for k in range(1, n_clusters + 1):
        members = above[point_cluster == k]
        lo = members[:, :2].min(axis=0)
        hi = members[:, :2].max(axis=0)
        sides = sorted(hi - lo, reverse=True)
        length, width = float(sides[0]), float(sides[1])
        label = "car" if (car_length[0] <= length <= car_length[1]
                          and car_width[0] <= width <= car_width[1]
                          and len(members) >= min_points) else "unknown"
        detections.append(Detection(center=tuple((lo + hi) / 2.0),
                                    extent=(length, width),
                                    n_points=len(members), label=label))
    return detections


def _as_pseudo_box(det) -> tuple[str, float | None]:
    """Normalize a detection-ish record to (class_name, yaw or None)."""
    if isinstance(det, Box3D):
        return det.class_name, det.yaw
    if isinstance(det, Detection):
        return det.label, None
    if isinstance(det, dict):
        return det.get("class", "car"), det.get("yaw")
    raise TypeError(f"unsupported detection record {type(det)!r}")


def tbr(prompt_records: list[dict], detections_per_scene: list[list],
        rules: AnnotationRules = AnnotationRules()) -> float:
    """Text-box recall: percent of scenes whose object-level caption parts
    (quantity, location, orientation) re-derive identically from the scene's
    detections. Scene-level parts (weather, time) are not scored."""
    if len(prompt_records) != len(detections_per_scene):
        raise ValueError("need one detection list per prompt record")
    if not prompt_records:
        raise ValueError("no scenes to score")

    matched = 0
    for rec, dets in zip(prompt_records, detections_per_scene):
        parts = rec.get("parts", {})
        pseudo = [_as_pseudo_box(d) for d in dets]
        boxes = [Box3D(center=(0.0, 0.0, 0.0), size=(1.0, 1.0, 1.0),
                       yaw=yaw if yaw is not None else float("nan"),
                       class_name=cls) for cls, yaw in pseudo]
        ok = True
        if "quantity" in parts:
            ok &= quantity_text(boxes, rules) == parts["quantity"]
        if ok and "location" in parts:
            ok &= location_text(boxes, rules) == parts["location"]
        if ok and "orientation" in parts:
            if any(cls == "car" and (yaw is None or math.isnan(yaw)) for cls, yaw in pseudo):
                ok = False  # yaw-free detections cannot support orientation clauses
            else:
                ok &= orientation_text(boxes, rules) == parts["orientation"]
        matched += bool(ok)
    return 100.0 * matched / len(prompt_records)


def report(gen_points_list: list[np.ndarray], ref_points_list: list[np.ndarray],
           prompt_records: list[dict] | None = None,
           detections_per_scene: list[list] | None = None,
           grid_size: int = 100, bev_range: float = 50.0,
           rules: AnnotationRules = AnnotationRules()) -> dict:
    """Assemble the evaluation report with the conventional scale factors."""
    if not gen_points_list or not ref_points_list:
        raise ValueError("need at least one generated and one reference cloud")
    gen_h = [bev_histogram(p, grid_size, bev_range) for p in gen_points_list]
    ref_h = [bev_histogram(p, grid_size, bev_range) for p in ref_points_list]
    gen_mean = np.mean([h.table for h in gen_h], axis=0)
    ref_mean = np.mean([h.table for h in ref_h], axis=0)

    n_pairs = min(len(gen_points_list), len(ref_points_list))
    pair = [upsample_metrics(gen_points_list[i], ref_points_list[i]) for i in range(n_pairs)]
    cd = float(np.mean([m["cd"] for m in pair]))
    mse = float(np.mean([m["mse"] for m in pair]))
    emd = float(np.mean([m["emd"] for m in pair]))

    tbr_pct = None
    if prompt_records is not None and detections_per_scene is not None:
        tbr_pct = tbr(prompt_records, detections_per_scene, rules)

    return {
        "jsd": jsd(gen_mean, ref_mean),
        "mmd_e4": mmd(gen_h, ref_h) * 1e4,
        "cd_e5": cd * 1e5,
        "mse_e5": mse * 1e5,
        "emd_e3": emd * 1e3,
        "tbr_pct": tbr_pct,
        "n_generated": len(gen_points_list),
        "n_reference": len(ref_points_list),
    }
