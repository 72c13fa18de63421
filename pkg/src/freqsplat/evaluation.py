"""Image and geometry quality metrics.

Conventions, both flagged in every report header because published numbers
are sensitive to them: Chamfer distance is the symmetric average of mean
nearest-neighbor L2 distances (not squared), and clouds are aligned by
mapping bounding boxes (per-axis scale + translation), not by ICP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate
from scipy.spatial import cKDTree

from .errors import InvalidParameterError
from .scene import GaussianCloud, ImageBuffer, quat_to_rotmat

PSNR_SENTINEL = 99.0
CD_CONVENTION = "symmetric-mean-L2"
ALIGNMENT = "bbox"


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise InvalidParameterError("non-finite point positions")

    def __len__(self) -> int:
        return len(self.positions)


def _image_pair(a, b):
    a = a.data if isinstance(a, ImageBuffer) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, ImageBuffer) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB (peak 1.0), capped at the 99 dB sentinel."""
    a, b = _image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * math.log10(1.0 / mse), PSNR_SENTINEL)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean local SSIM with a Gaussian window, averaged over channels."""
    a, b = _image_pair(a, b)
    if min(a.shape[0], a.shape[1]) < window_size:
        raise InvalidParameterError(
            f"images must be at least {window_size}px on each side for SSIM"
        )
    window = gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    half = window_size // 2
    valid = (slice(half, a.shape[0] - half), slice(half, a.shape[1] - half))

    def local_mean(img):
        return correlate(img, window, mode="constant")[valid]

    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = local_mean(x)
        mu_y = local_mean(y)
        sigma_x = local_mean(x * x) - mu_x**2
        sigma_y = local_mean(y * y) - mu_y**2
        sigma_xy = local_mean(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def sample_points(cloud: GaussianCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw surface-ish samples: splats weighted by opacity * volume, then one
    point from each selected anisotropic Gaussian."""
    if n < 1:
        raise InvalidParameterError("need n >= 1 samples")
    if len(cloud) == 0:
        raise InvalidParameterError("cannot sample an empty cloud")
    opacities = cloud.opacities
    scales = cloud.scales
    weights = opacities * np.prod(scales, axis=1)
    total = weights.sum()
    if total <= 0 or opacities.max() <= 0:
        raise InvalidParameterError("cloud is fully transparent")
    idx = rng.choice(len(cloud), size=n, p=weights / total)
    local = rng.standard_normal((n, 3)) * scales[idx]
    R = quat_to_rotmat(cloud.rotations[idx])
    return PointCloud(cloud.positions[idx] + np.einsum("nij,nj->ni", R, local))


def _check_nonempty(p: PointCloud, q: PointCloud):
    if len(p) == 0 or len(q) == 0:
        raise InvalidParameterError("point clouds must be nonempty")


def nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """For each source point, the L2 distance to its nearest destination point."""
    tree = cKDTree(dst)
    dist, _ = tree.query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def chamfer_distance(p: PointCloud, q: PointCloud) -> float:
    """0.5 * (mean NN distance p->q + mean NN distance q->p)."""
    _check_nonempty(p, q)
    d_pq = nn_distances(p.positions, q.positions)
    d_qp = nn_distances(q.positions, p.positions)
    return 0.5 * (float(d_pq.mean()) + float(d_qp.mean()))


def f_score(p: PointCloud, q: PointCloud, threshold: float = 0.2) -> float:
    """Harmonic mean of precision and recall at the distance threshold."""
    if threshold <= 0:
        raise InvalidParameterError("threshold must be positive")
    _check_nonempty(p, q)
    precision = float(np.mean(nn_distances(p.positions, q.positions) <= threshold))
    recall = float(np.mean(nn_distances(q.positions, p.positions) <= threshold))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class Alignment:
    points: PointCloud
    scale: np.ndarray        # per-axis
    translation: np.ndarray  # applied as x' = scale * x + translation


def align_normalize(pred: PointCloud, gt: PointCloud) -> Alignment:
    """Map pred's bounding box onto gt's (per-axis scale + translation)."""
    _check_nonempty(pred, gt)
    p_lo, p_hi = pred.positions.min(axis=0), pred.positions.max(axis=0)
    g_lo, g_hi = gt.positions.min(axis=0), gt.positions.max(axis=0)
    p_ext = p_hi - p_lo
    if np.any(p_ext == 0):
        raise InvalidParameterError("pred cloud has zero extent along an axis")
    scale = (g_hi - g_lo) / p_ext
    p_center = 0.5 * (p_lo + p_hi)
    g_center = 0.5 * (g_lo + g_hi)
    translation = g_center - scale * p_center
    return Alignment(
        PointCloud(pred.positions * scale + translation), scale, translation
    )
