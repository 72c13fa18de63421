"""CPU splatting: EWA perspective projection, depth-sorted alpha compositing,
and an analytic backward pass for every Gaussian parameter.

Compositing follows the front-to-back transmittance recursion; the backward
pass replays it and walks back-to-front with a "scene behind this splat"
accumulator, so no division by (1 - alpha) is ever needed and opaque splats
stay differentiable. Work is split over pixel tiles processed in fixed order,
which keeps results bit-stable for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .scene import Camera, GaussianCloud, ImageBuffer, quat_to_rotmat

ALPHA_MIN = 1.0 / 255.0


@dataclass
class RenderSettings:
    lowpass_floor: float = 0.3          # px^2 added to the 2D covariance diagonal
    mahalanobis_max: float = 3.0        # splat support radius
    early_out: float | None = 1e-4      # stop a pixel once transmittance drops below
    tile_size: int = 64
    n_threads: int = 1

    @classmethod
    def oracle(cls) -> "RenderSettings":
        """Exact single-thread mode: no transmittance early-out."""
        return cls(early_out=None, n_threads=1)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderOutput:
    color: ImageBuffer
    alpha: ImageBuffer
    contributors: np.ndarray

    @property
    def rgb(self) -> np.ndarray:
        return self.color.data


class _Projection:
    """Depth-sorted per-Gaussian screen-space quantities for one camera."""

    __slots__ = (
        "idx", "mean2d", "cov2d", "conic", "conic3", "depth", "color", "alpha",
        "J", "tcam", "V3", "M3", "Rq", "qhat", "qnorm", "W",
        "fx", "fy", "bbox", "mahal_max",
    )


def _project_cloud(cloud: GaussianCloud, cam: Camera, settings: RenderSettings) -> _Projection:
    view = cam.view_matrix()
    W = view[:3, :3]
    k = len(cloud)
    p = _Projection()
    p.W = W
    p.fx = p.fy = cam.focal
    p.mahal_max = settings.mahalanobis_max
    if k == 0:
        p.idx = np.zeros(0, dtype=np.intp)
        p.mean2d = np.zeros((0, 2))
        p.cov2d = np.zeros((0, 2, 2))
        p.conic = np.zeros((0, 2, 2))
        p.conic3 = np.zeros((0, 3))
        p.depth = np.zeros(0)
        p.color = np.zeros((0, 3))
        p.alpha = np.zeros(0)
        p.bbox = np.zeros((0, 4), dtype=np.int64)
        return p

    tcam = cloud.positions @ W.T + view[:3, 3]
    alpha = cloud.opacities
    keep = (tcam[:, 2] > cam.near) & (alpha >= ALPHA_MIN)
    idx = np.flatnonzero(keep)
    tcam = tcam[idx]
    qnorm = np.linalg.norm(cloud.rotations[idx], axis=1)
    qhat = cloud.rotations[idx] / qnorm[:, None]
    Rq = quat_to_rotmat(qhat)
    scales = cloud.scales[idx]
    M3 = Rq * scales[:, None, :]            # R @ diag(s)
    sigma = M3 @ np.transpose(M3, (0, 2, 1))
    V3 = np.einsum("ai,nij,bj->nab", W, sigma, W)

    x, y, z = tcam[:, 0], tcam[:, 1], tcam[:, 2]
    fx, fy = p.fx, p.fy
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    cov2d = np.einsum("nai,nij,nbj->nab", J, V3, J)
    cov2d[:, 0, 0] += settings.lowpass_floor
    cov2d[:, 1, 1] += settings.lowpass_floor

    cx, cy = cam.principal_point
    mean2d = np.stack([fx * x / z + cx, fy * y / z + cy], axis=1)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    r = settings.mahalanobis_max
    rx = r * np.sqrt(cov2d[:, 0, 0])
    ry = r * np.sqrt(cov2d[:, 1, 1])
    bbox = np.empty((len(idx), 4), dtype=np.int64)  # c0, c1, r0, r1 (half-open)
    bbox[:, 0] = np.clip(np.floor(mean2d[:, 0] - rx), 0, cam.width).astype(np.int64)
    bbox[:, 1] = np.clip(np.ceil(mean2d[:, 0] + rx) + 1, 0, cam.width).astype(np.int64)
    bbox[:, 2] = np.clip(np.floor(mean2d[:, 1] - ry), 0, cam.height).astype(np.int64)
    bbox[:, 3] = np.clip(np.ceil(mean2d[:, 1] + ry) + 1, 0, cam.height).astype(np.int64)

    order = np.argsort(z, kind="stable")    # ties keep ascending storage index
    p.idx = idx[order]
    p.mean2d = mean2d[order]
    p.cov2d = cov2d[order]
    p.conic = conic[order]
    p.conic3 = np.ascontiguousarray(
        np.stack([p.conic[:, 0, 0], p.conic[:, 0, 1], p.conic[:, 1, 1]], axis=1)
    )
    p.depth = z[order]
    p.color = cloud.colors[idx][order]
    p.alpha = alpha[idx][order]
    p.J = J[order]
    p.tcam = tcam[order]
    p.V3 = V3[order]
    p.M3 = M3[order]
    p.Rq = Rq[order]
    p.qhat = qhat[order]
    p.qnorm = qnorm[order]
    p.bbox = bbox[order]
    return p


def project_gaussian(position, scale, rotation, color, opacity, cam: Camera,
                     lowpass_floor: float = 0.3) -> ProjectedGaussian | None:
    """Project one Gaussian; returns None when culled by the near plane."""
    cloud = GaussianCloud.from_values(
        np.asarray(position, dtype=np.float64).reshape(1, 3),
        np.asarray(scale, dtype=np.float64).reshape(1, 3),
        np.asarray(rotation, dtype=np.float64).reshape(1, 4),
        np.asarray(color, dtype=np.float64).reshape(1, 3),
        np.asarray([opacity], dtype=np.float64),
    )
    proj = _project_cloud(cloud, cam, RenderSettings(lowpass_floor=lowpass_floor))
    if len(proj.idx) == 0:
        return None
    return ProjectedGaussian(
        mean2d=proj.mean2d[0],
        cov2d=proj.cov2d[0],
        depth=float(proj.depth[0]),
        color=proj.color[0],
        opacity=float(proj.alpha[0]),
    )


def _tile_rects(height: int, width: int, tile: int):
    rects = []
    for r0 in range(0, height, tile):
        for c0 in range(0, width, tile):
            rects.append((r0, min(r0 + tile, height), c0, min(c0 + tile, width)))
    return rects


def _tile_entries(proj: _Projection, rect):
    """Depth-ordered splats touching this tile, with clipped footprints and
    flat cache-buffer offsets."""
    r0, r1, c0, c1 = rect
    b = proj.bbox
    sc0 = np.maximum(b[:, 0], c0)
    sc1 = np.minimum(b[:, 1], c1)
    sr0 = np.maximum(b[:, 2], r0)
    sr1 = np.minimum(b[:, 3], r1)
    areas = np.maximum(sr1 - sr0, 0) * np.maximum(sc1 - sc0, 0)
    sel = np.flatnonzero(areas > 0)
    rects = np.ascontiguousarray(
        np.stack([sr0[sel], sr1[sel], sc0[sel], sc1[sel]], axis=1), dtype=np.int64
    )
    offsets = np.zeros(len(sel), dtype=np.int64)
    if len(sel):
        offsets[1:] = np.cumsum(areas[sel])[:-1]
    return sel.astype(np.int64), rects, offsets, int(areas[sel].sum())


def _forward_tile(proj: _Projection, rect, background, settings, keep_cache: bool):
    r0, r1, c0, c1 = rect
    h, w = r1 - r0, c1 - c0
    color = np.zeros((h, w, 3))
    T = np.ones((h, w))
    counts = np.zeros((h, w), dtype=np.int32)
    splat_ids, rects, offsets, total = _tile_entries(proj, rect)
    size = total if keep_cache else 0
    ah_buf = np.empty(size)
    tb_buf = np.empty(size)
    early = settings.early_out if settings.early_out is not None else 0.0
    processed = _kernels.composite_tile(
        proj.mean2d, proj.conic3, proj.color, proj.alpha,
        rects, offsets, splat_ids, r0, c0,
        np.asarray(background, dtype=np.float64), early,
        proj.mahal_max**2, ALPHA_MIN, color, T, counts,
        keep_cache, ah_buf, tb_buf,
    )
    cache = (splat_ids, rects, offsets, processed, ah_buf, tb_buf) if keep_cache else None
    return color, T, counts, cache


def _backward_tile(proj: _Projection, rect, background, loss_grad, cache, grads2d):
    """Accumulate screen-space gradients for one tile into grads2d."""
    r0, r1, c0, c1 = rect
    splat_ids, rects, offsets, processed, ah_buf, tb_buf = cache
    d_mean2d, d_conic3, d_alpha, d_color = grads2d
    _kernels.backward_tile(
        proj.mean2d, proj.conic3, proj.color, proj.alpha,
        rects, offsets, splat_ids, processed, r0, c0, r1 - r0, c1 - c0,
        np.asarray(background, dtype=np.float64), loss_grad,
        ah_buf, tb_buf, d_mean2d, d_conic3, d_alpha, d_color,
    )


def rasterize(cloud: GaussianCloud, cam: Camera, background=(1.0, 1.0, 1.0),
              settings: RenderSettings | None = None) -> RenderOutput:
    """Forward compositing of the cloud under `cam` over a constant background."""
    settings = settings or RenderSettings()
    proj = _project_cloud(cloud, cam, settings)
    rects = _tile_rects(cam.height, cam.width, settings.tile_size)

    def run(rect):
        return _forward_tile(proj, rect, background, settings, keep_cache=False)

    if settings.n_threads > 1 and len(rects) > 1:
        with ThreadPoolExecutor(max_workers=settings.n_threads) as pool:
            results = list(pool.map(run, rects))
    else:
        results = [run(r) for r in rects]

    color = np.empty((cam.height, cam.width, 3))
    alpha = np.empty((cam.height, cam.width))
    counts = np.empty((cam.height, cam.width), dtype=np.int32)
    for rect, (tc, tT, tn, _) in zip(rects, results):
        r0, r1, c0, c1 = rect
        color[r0:r1, c0:c1] = tc
        alpha[r0:r1, c0:c1] = 1.0 - tT
        counts[r0:r1, c0:c1] = tn
    return RenderOutput(ImageBuffer(color), ImageBuffer(alpha), counts)


@dataclass
class _GradContext:
    cloud: GaussianCloud
    cam: Camera
    background: tuple
    settings: RenderSettings
    proj: _Projection
    rects: list
    caches: list
    output: "RenderOutput"


def render_cached(cloud: GaussianCloud, cam: Camera, background=(1.0, 1.0, 1.0),
                  settings: RenderSettings | None = None):
    """Forward pass that keeps per-tile compositing state for a later backprop.

    The backward pass replays the cached (possibly early-out-masked) alpha
    maps, so gradients are exactly those of this forward function; use
    RenderSettings.oracle() when comparing against finite differences.
    Returns (RenderOutput, context).
    """
    settings = settings or RenderSettings()
    proj = _project_cloud(cloud, cam, settings)
    rects = _tile_rects(cam.height, cam.width, settings.tile_size)

    def run(rect):
        return _forward_tile(proj, rect, background, settings, keep_cache=True)

    if settings.n_threads > 1 and len(rects) > 1:
        with ThreadPoolExecutor(max_workers=settings.n_threads) as pool:
            results = list(pool.map(run, rects))
    else:
        results = [run(r) for r in rects]

    color = np.empty((cam.height, cam.width, 3))
    alpha = np.empty((cam.height, cam.width))
    counts = np.empty((cam.height, cam.width), dtype=np.int32)
    caches = []
    for rect, (tc, tT, tn, cache) in zip(rects, results):
        r0, r1, c0, c1 = rect
        color[r0:r1, c0:c1] = tc
        alpha[r0:r1, c0:c1] = 1.0 - tT
        counts[r0:r1, c0:c1] = tn
        caches.append(cache)
    out = RenderOutput(ImageBuffer(color), ImageBuffer(alpha), counts)
    return out, _GradContext(cloud, cam, background, settings, proj, rects, caches, out)


def backprop(ctx: _GradContext, loss_grad: np.ndarray) -> dict:
    """Gradients of sum_p <loss_grad[p], C[p]> for every unconstrained parameter."""
    cam = ctx.cam
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (cam.height, cam.width, 3):
        raise ValueError(f"loss_grad shape {loss_grad.shape} != render shape")
    n = len(ctx.proj.idx)

    def run(args):
        rect, cache = args
        g2d = (np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))
        _backward_tile(ctx.proj, rect, ctx.background, loss_grad, cache, g2d)
        return g2d

    jobs = list(zip(ctx.rects, ctx.caches))
    if ctx.settings.n_threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=ctx.settings.n_threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    d_mean2d = np.zeros((n, 2))
    d_conic3 = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_color = np.zeros((n, 3))
    for g2d in results:  # fixed merge order
        d_mean2d += g2d[0]
        d_conic3 += g2d[1]
        d_alpha += g2d[2]
        d_color += g2d[3]
    d_conic = np.empty((n, 2, 2))
    d_conic[:, 0, 0] = d_conic3[:, 0]
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = d_conic3[:, 1]
    d_conic[:, 1, 1] = d_conic3[:, 2]
    return _chain_to_parameters(ctx.cloud, ctx.proj, d_mean2d, d_conic, d_alpha, d_color)


def rasterize_with_gradients(cloud: GaussianCloud, cam: Camera, background,
                             loss_grad: np.ndarray,
                             settings: RenderSettings | None = None):
    """One-shot render + backward; returns (grads dict, RenderOutput)."""
    out, ctx = render_cached(cloud, cam, background, settings)
    return backprop(ctx, loss_grad), out


def _quat_rotmat_grads(qhat: np.ndarray) -> np.ndarray:
    """Batched dR/dq for unit quaternions: (n, 4) -> (n, 4, 3, 3)."""
    n = len(qhat)
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    o = np.zeros(n)
    dR = np.empty((n, 4, 3, 3))
    dR[:, 0] = 2.0 * np.stack([o, -z, y, z, o, -x, -y, x, o], axis=1).reshape(n, 3, 3)
    dR[:, 1] = 2.0 * np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(n, 3, 3)
    dR[:, 2] = 2.0 * np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], axis=1).reshape(n, 3, 3)
    dR[:, 3] = 2.0 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], axis=1).reshape(n, 3, 3)
    return dR


def _chain_to_parameters(cloud, proj: _Projection, d_mean2d, d_conic, d_alpha, d_color):
    k = len(cloud)
    grads = {
        "positions": np.zeros((k, 3)),
        "log_scales": np.zeros((k, 3)),
        "rotations": np.zeros((k, 4)),
        "color_logits": np.zeros((k, 3)),
        "opacity_logits": np.zeros(k),
    }
    n = len(proj.idx)
    if n == 0:
        return grads

    conic, J, V3, W = proj.conic, proj.J, proj.V3, proj.W
    # conic = cov2d^-1: dL/dcov2d = -conic @ dL/dconic @ conic
    Gcov = -np.einsum("nab,nbc,ncd->nad", conic, d_conic, conic)
    GV = np.einsum("nai,nab,nbj->nij", J, Gcov, J)
    Gsigma = np.einsum("ai,nab,bj->nij", W, GV, W)
    GJ = 2.0 * np.einsum("nab,nbi,nij->naj", Gcov, J, V3)

    x, y, z = proj.tcam[:, 0], proj.tcam[:, 1], proj.tcam[:, 2]
    fx, fy = proj.fx, proj.fy
    dt = np.einsum("nai,na->ni", J, d_mean2d)
    dt[:, 0] += GJ[:, 0, 2] * (-fx / z**2)
    dt[:, 1] += GJ[:, 1, 2] * (-fy / z**2)
    dt[:, 2] += (
        GJ[:, 0, 0] * (-fx / z**2)
        + GJ[:, 0, 2] * (2.0 * fx * x / z**3)
        + GJ[:, 1, 1] * (-fy / z**2)
        + GJ[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    d_pos = dt @ W

    GM3 = 2.0 * np.einsum("nij,njk->nik", Gsigma, proj.M3)
    scales = cloud.scales[proj.idx]
    d_scale = np.einsum("nik,nik->nk", proj.Rq, GM3)
    d_log_scale = d_scale * scales
    GR = GM3 * scales[:, None, :]
    dRdq = _quat_rotmat_grads(proj.qhat)
    d_qhat = np.einsum("nik,nqik->nq", GR, dRdq)
    # through q / |q|
    d_qraw = (d_qhat - proj.qhat * np.sum(proj.qhat * d_qhat, axis=1, keepdims=True))
    d_qraw /= proj.qnorm[:, None]

    colors = proj.color
    alphas = proj.alpha
    grads["positions"][proj.idx] = d_pos
    grads["log_scales"][proj.idx] = d_log_scale
    grads["rotations"][proj.idx] = d_qraw
    grads["color_logits"][proj.idx] = d_color * colors * (1.0 - colors)
    grads["opacity_logits"][proj.idx] = d_alpha * alphas * (1.0 - alphas)
    return grads
