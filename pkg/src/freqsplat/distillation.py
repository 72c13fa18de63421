"""Distillation losses and the per-iteration update.

Three gradient sources feed one optimizer step: a band-limited score
residual from a view-conditioned provider (geometry branch), the same
machinery on the complementary band from a 2D provider (texture branch),
and a masked reconstruction loss against the reference view.

Sign convention: `sds_residual` returns filtered(eps - eps_pred); the
parameter gradient pushed through the renderer is omega(t) * the negated
residual, which is the descent direction (with the synthetic provider it
reduces to plain L2 descent of the render toward the provider's target).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, InvalidParameterError, ProviderError
from .frequency import FrequencyMask, Spectrum, adaptive_cutoff, dft2, idft2, make_masks
from .priors import (
    NoiseSchedule,
    ScoreRequest,
    SyntheticGaussianProvider,
    TextEmbedding,
    ViewCondition,
    add_noise,
)
from .renderer import RenderSettings, backprop, rasterize, render_cached
from .scene import (
    Camera,
    GaussianCloud,
    MaskedImage,
    MatrixCamera,
    relative_view_transform,
    view_from_relative,
)

FILTERED_RESIDUAL = "filtered"
AMPLITUDE_RESIDUAL = "amplitude"


@dataclass
class AdaptiveBandSpec:
    """Mask recipe resolved per step from a live spectrum.

    `source` picks the spectrum the energy cutoff is computed on: the
    current render ("render") or the provider's noise prediction
    ("prediction").
    """

    band: str                      # "low" | "high"
    energy_fraction: float = 0.85
    softness: float = 2.0
    source: str = "render"


@dataclass
class SdsGradient:
    """Pixel-space gradient pushed through the renderer, plus diagnostics."""

    pixel_grad: np.ndarray
    residual_norm: float
    timestep: int
    branch: str
    degenerate: bool = False
    cutoff_radius: float | None = None


def encode_latent(img: np.ndarray, downsample: int = 1) -> np.ndarray:
    """Identity encoder with optional area downsampling (H, W, C) -> (H/f, W/f, C)."""
    img = np.asarray(img, dtype=np.float64)
    if downsample == 1:
        return img
    h, w, c = img.shape
    f = downsample
    if h % f or w % f:
        raise InvalidParameterError(f"render size {h}x{w} not divisible by {f}")
    return img.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))


def decode_latent_grad(grad: np.ndarray, downsample: int = 1) -> np.ndarray:
    """Adjoint of encode_latent."""
    if downsample == 1:
        return grad
    f = downsample
    return np.repeat(np.repeat(grad, f, axis=0), f, axis=1) / (f * f)


def sds_residual(eps: np.ndarray, eps_pred: np.ndarray,
                 mask: FrequencyMask | None = None,
                 mode: str = FILTERED_RESIDUAL) -> np.ndarray:
    """Band-limited score residual; all-pass filtered mode is exactly eps - eps_pred."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if eps.shape != eps_pred.shape:
        raise InvalidParameterError(f"shapes differ: {eps.shape} vs {eps_pred.shape}")
    if mode == FILTERED_RESIDUAL:
        if mask is None:
            return eps - eps_pred
        diff = dft2(eps).coeffs - dft2(eps_pred).coeffs
        return idft2(Spectrum(diff * mask.weights[:, :, None]))
    if mode == AMPLITUDE_RESIDUAL:
        f_eps = dft2(eps).coeffs
        f_pred = dft2(eps_pred).coeffs
        weights = 1.0 if mask is None else mask.weights[:, :, None]
        amp_residual = weights * (np.abs(f_eps) - np.abs(f_pred))
        phase = np.exp(1j * np.angle(f_pred))
        return idft2(Spectrum(amp_residual * phase))
    raise InvalidParameterError(f"unknown residual mode {mode!r}")


def _resolve_mask(mask, z: np.ndarray, eps_pred: np.ndarray):
    """Accept None (all-pass), a concrete mask, or an adaptive band recipe."""
    if mask is None or isinstance(mask, FrequencyMask):
        return mask, None
    if isinstance(mask, AdaptiveBandSpec):
        source = z if mask.source == "render" else eps_pred
        cutoff = adaptive_cutoff(dft2(source), mask.energy_fraction)
        low, high = make_masks(z.shape[1], z.shape[0], cutoff, mask.softness)
        if mask.band == "low":
            return low, cutoff
        if mask.band == "high":
            return high, cutoff
        raise InvalidParameterError(f"unknown band {mask.band!r}")
    raise InvalidParameterError(f"cannot interpret mask {type(mask).__name__}")


def sds_step_grad(cloud: GaussianCloud, cam, provider, cond, sched: NoiseSchedule,
                  mask=None, mode: str = FILTERED_RESIDUAL, guidance: float = 1.0,
                  rng: np.random.Generator | None = None, *,
                  t: int | None = None, eps: np.ndarray | None = None,
                  t_range: tuple[float, float] = (0.02, 0.98),
                  background=(1.0, 1.0, 1.0), settings: RenderSettings | None = None,
                  latent_downsample: int = 1, branch: str = "FULL"):
    """One distillation gradient: render, noise, query the provider, band-limit
    the residual, and push it through the renderer. Returns (grads, SdsGradient)."""
    out, ctx = render_cached(cloud, cam, background, settings)
    z = encode_latent(out.rgb, latent_downsample)

    if t is None:
        lo = int(round(t_range[0] * (sched.num_steps - 1)))
        hi = max(int(round(t_range[1] * (sched.num_steps - 1))), lo)
        t = int(rng.integers(lo, hi + 1))
    if eps is None:
        eps = rng.standard_normal(z.shape)
    z_t = add_noise(z, eps, t, sched)

    request = ScoreRequest(
        latent=np.transpose(z_t, (2, 0, 1)),
        timestep=t,
        conditioning=cond,
        guidance_scale=guidance,
    )
    try:
        eps_pred = np.transpose(provider.predict(request), (1, 2, 0))
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(str(exc), branch=branch) from exc

    resolved, cutoff = _resolve_mask(mask, z, eps_pred)
    residual = sds_residual(eps, eps_pred, resolved, mode)
    grad_latent = -sched.omega(t) * residual
    grad_pixels = decode_latent_grad(grad_latent, latent_downsample)

    degenerate = float(out.alpha.data.max()) <= 0.0
    if degenerate:
        grads = {name: np.zeros_like(arr) for name, arr in cloud.parameters().items()}
        look_at = getattr(cam, "look_at", np.zeros(3))
        grads["positions"] = cloud.positions - look_at[None, :]
    else:
        grads = backprop(ctx, grad_pixels)
    diag = SdsGradient(
        pixel_grad=grad_pixels,
        residual_norm=float(np.linalg.norm(residual)),
        timestep=t,
        branch=branch,
        degenerate=degenerate,
        cutoff_radius=cutoff,
    )
    return grads, diag


def reference_loss_grad(cloud: GaussianCloud, ref: MaskedImage, ref_cam,
                        *, background=(1.0, 1.0, 1.0),
                        settings: RenderSettings | None = None):
    """Masked MSE against the reference view, averaged over masked pixels.

    Returns (loss, grads, RenderOutput); pixels outside the mask influence
    neither the value nor the gradients.
    """
    mask = ref.mask.data[:, :, 0]
    n_masked = float(mask.sum())
    if n_masked == 0:
        raise EmptyMaskError("reference mask selects no pixels")
    out, ctx = render_cached(cloud, ref_cam, background, settings)
    if out.rgb.shape != ref.image.data.shape:
        raise InvalidParameterError(
            f"render {out.rgb.shape} does not match reference {ref.image.data.shape}"
        )
    masked_diff = (out.rgb - ref.image.data) * mask[:, :, None]
    loss = float(np.sum(masked_diff**2) / n_masked)
    grads = backprop(ctx, 2.0 * masked_diff / n_masked)
    return loss, grads, out


class Adam:
    """Adaptive-moment optimizer over named parameter groups."""

    def __init__(self, shapes: dict, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud, **kw) -> "Adam":
        return cls({k: v.shape for k, v in cloud.parameters().items()}, **kw)

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(params):
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            params[name] -= lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)


def _accumulate(total: dict, grads: dict, weight: float) -> None:
    for name in total:
        total[name] += weight * grads[name]


def position_lr(plan, iteration: int) -> float:
    """Exponential decay of the position learning rate over the run."""
    span = max(plan.total_iterations - 1, 1)
    frac = min(max(iteration / span, 0.0), 1.0)
    return plan.lr_position_initial * (plan.lr_position_final / plan.lr_position_initial) ** frac


def scene_score_provider(gt_cloud: GaussianCloud, sched: NoiseSchedule, ref_cam,
                         width: int, height: int, fov_y: float = 49.1,
                         background=(1.0, 1.0, 1.0),
                         settings: RenderSettings | None = None,
                         latent_downsample: int = 1) -> SyntheticGaussianProvider:
    """Synthetic provider whose target is a render of a frozen ground-truth
    cloud at the view encoded in the request's conditioning."""
    settings = settings or RenderSettings()

    def target_fn(request: ScoreRequest) -> np.ndarray:
        cond = request.conditioning
        if not isinstance(cond, ViewCondition):
            raise ProviderError("scene provider requires view conditioning")
        view = view_from_relative(ref_cam, cond.rotation, cond.translation)
        cam = MatrixCamera(view, fov_y=fov_y, width=width, height=height)
        img = rasterize(gt_cloud, cam, background, settings).rgb
        return np.transpose(encode_latent(img, latent_downsample), (2, 0, 1))

    return SyntheticGaussianProvider(sched, target_fn=target_fn)


def hybrid_step(cloud: GaussianCloud, plan, stage: int, providers: dict, views,
                rng: np.random.Generator, opt: Adam, iteration: int,
                sched: NoiseSchedule) -> dict:
    """One staged optimization step (stage 1: low band + reference; stage 2:
    high band + reference). Mutates the cloud in place, returns metrics."""
    if stage not in (1, 2):
        raise InvalidParameterError("stage must be 1 or 2")
    settings = plan.render_settings()
    background = tuple(plan.background)
    ref_cam = views.reference_camera
    total = {name: np.zeros_like(arr) for name, arr in cloud.parameters().items()}
    metrics = {"iteration": iteration, "stage": stage}

    lam_sds = plan.lambda_lf if stage == 1 else plan.lambda_hf
    if lam_sds != 0.0:
        azimuth = float(rng.uniform(0.0, 360.0))
        elevation = float(rng.uniform(*plan.sds_elevation_range))
        cam = Camera(
            azimuth=azimuth, elevation=elevation, distance=ref_cam.distance,
            fov_y=ref_cam.fov_y, width=plan.render_width, height=plan.render_height,
            look_at=ref_cam.look_at,
        )
        rotation, translation = relative_view_transform(ref_cam, cam)
        if stage == 1 or plan.hf_conditioning == "view":
            cond = ViewCondition(views.reference.image.data, rotation, translation)
        else:
            cond = TextEmbedding(tuple(plan.text_embedding))
        progress = iteration / max(plan.total_iterations - 1, 1)
        t_hi = plan.t_max_start + (plan.t_max_end - plan.t_max_start) * progress
        band = "low" if stage == 1 else "high"
        mask_spec = AdaptiveBandSpec(
            band, plan.energy_fraction, plan.mask_softness, plan.cutoff_source
        )
        grads_sds, diag = sds_step_grad(
            cloud, cam, providers["3d" if stage == 1 else "2d"], cond, sched,
            mask=mask_spec, mode=plan.residual_mode,
            guidance=plan.guidance_3d if stage == 1 else plan.guidance_2d,
            rng=rng, t_range=(plan.t_min, t_hi), background=background,
            settings=settings, latent_downsample=plan.latent_downsample,
            branch="LF" if stage == 1 else "HF",
        )
        _accumulate(total, grads_sds, lam_sds)
        metrics.update(
            sds_residual_norm=diag.residual_norm,
            timestep=diag.timestep,
            cutoff_radius=diag.cutoff_radius,
            degenerate_render=int(diag.degenerate),
        )

    if plan.lambda_ref != 0.0:
        ref_loss, grads_ref, ref_out = reference_loss_grad(
            cloud, views.reference, ref_cam, background=background, settings=settings
        )
        _accumulate(total, grads_ref, plan.lambda_ref)
    else:
        ref_out = rasterize(cloud, ref_cam, background, settings)
        diff = ref_out.rgb - views.reference.image.data
        ref_loss = float(np.mean(diff**2))
    mse = float(np.mean((ref_out.rgb - views.reference.image.data) ** 2))
    metrics["ref_loss"] = ref_loss
    metrics["psnr_ref"] = 99.0 if mse == 0 else min(10.0 * np.log10(1.0 / mse), 99.0)

    if plan.lambda_aux != 0.0 and views.aux:
        pick = int(rng.integers(len(views.aux)))
        aux_img, aux_cam = views.aux[pick]
        aux_loss, grads_aux, _ = reference_loss_grad(
            cloud, aux_img, aux_cam, background=background, settings=settings
        )
        _accumulate(total, grads_aux, plan.lambda_aux)
        metrics["aux_loss"] = aux_loss

    lr_pos = position_lr(plan, iteration)
    lrs = {
        "positions": lr_pos,
        "log_scales": plan.lr_scale,
        "rotations": plan.lr_rotation,
        "color_logits": plan.lr_color,
        "opacity_logits": plan.lr_opacity,
    }
    opt.step(cloud.parameters(), total, lrs)
    cloud.normalize_rotations()
    metrics["lr_position"] = lr_pos
    return metrics
