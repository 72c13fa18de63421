"""Score backends: deterministic test backends plus optional adapters for
real diffusion checkpoints.

A backend answers `predict(request) -> float32 ndarray` of the request's
latent shape, applying classifier-free guidance itself when the request's
guidance scale is not 1. `accepts` lists the conditioning types it serves;
the server answers anything else with an error frame.
"""

from __future__ import annotations

import numpy as np

from .wire import Request


class BackendError(Exception):
    """Request cannot be served by this backend."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class BackendUnavailable(BackendError):
    """Backend dependencies or weights are missing."""

    def __init__(self, message: str):
        super().__init__("backend_unavailable", message)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0.0:
        return eps_uncond.copy()
    if scale == 1.0:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


class EchoBackend:
    """Zeros of the request shape; the protocol smoke-test backend."""

    accepts = ("unconditional", "text", "view")

    def predict(self, request: Request) -> np.ndarray:
        return np.zeros(request.shape, dtype=np.float32)


class FixtureBackend:
    """Replays a recorded archive keyed by the canonical request digest."""

    accepts = ("unconditional", "text", "view")

    def __init__(self, path: str):
        with np.load(path) as archive:
            self.responses = {k: archive[k] for k in archive.files}

    def predict(self, request: Request) -> np.ndarray:
        digest = request.digest()
        try:
            stored = self.responses[digest]
        except KeyError:
            raise BackendError("missing_fixture",
                               f"no recorded response for {digest[:16]}…") from None
        if stored.shape != request.shape:
            raise BackendError("shape_mismatch",
                               f"fixture {stored.shape} vs request {request.shape}")
        return stored.astype(np.float32)


class StableDiffusionBackend:
    """2D prior over text/unconditional requests via a diffusers UNet.

    Optional extra: needs torch + diffusers and a checkpoint download. The
    request's opaque text embedding is reshaped to the UNet's
    cross-attention width; guidance runs the unconditional branch with a
    zero embedding.
    """

    accepts = ("unconditional", "text")

    def __init__(self, model_id: str = "stabilityai/stable-diffusion-2-1-base",
                 device: str = "cpu"):
        try:
            import torch
            from diffusers import UNet2DConditionModel
        except ImportError as exc:
            raise BackendUnavailable(
                f"StableDiffusion backend needs torch+diffusers: {exc}") from exc
        self.torch = torch
        self.device = device
        self.unet = UNet2DConditionModel.from_pretrained(
            model_id, subfolder="unet").to(device).eval()
        self.width = self.unet.config.cross_attention_dim

    def _embed(self, request: Request):
        torch = self.torch
        if request.conditioning["type"] == "text":
            vec = np.asarray(request.conditioning["embedding"], dtype=np.float32)
            if vec.size % self.width:
                raise BackendError(
                    "bad_conditioning",
                    f"text embedding length {vec.size} not a multiple of {self.width}")
            emb = vec.reshape(1, -1, self.width)
        else:
            emb = np.zeros((1, 1, self.width), dtype=np.float32)
        return torch.from_numpy(emb).to(self.device)

    def predict(self, request: Request) -> np.ndarray:
        torch = self.torch
        latent = torch.from_numpy(request.latent[None].copy()).to(self.device)
        t = torch.tensor([request.timestep], device=self.device)
        with torch.no_grad():
            cond = self.unet(latent, t, encoder_hidden_states=self._embed(request)).sample
            if request.guidance_scale != 1.0:
                zero = torch.zeros((1, 1, self.width), device=self.device)
                uncond = self.unet(latent, t, encoder_hidden_states=zero).sample
                out = cfg_combine(uncond[0].cpu().numpy(), cond[0].cpu().numpy(),
                                  request.guidance_scale)
            else:
                out = cond[0].cpu().numpy()
        return out.astype(np.float32)


class Zero123Backend:
    """3D-aware prior over view-conditioned requests.

    Optional extra: needs torch + diffusers with a zero123-style pipeline
    whose UNet conditions on the reference image and the relative camera
    transform carried in the request header.
    """

    accepts = ("view",)

    def __init__(self, model_id: str = "kxic/zero123-xl", device: str = "cpu"):
        try:
            import torch  # noqa: F401
            from diffusers import DiffusionPipeline
        except ImportError as exc:
            raise BackendUnavailable(
                f"Zero123 backend needs torch+diffusers: {exc}") from exc
        import torch
        self.torch = torch
        self.device = device
        self.pipe = DiffusionPipeline.from_pretrained(
            model_id, trust_remote_code=True).to(device)

    def predict(self, request: Request) -> np.ndarray:
        torch = self.torch
        cond = request.conditioning
        rotation = np.asarray(cond["rotation"], dtype=np.float32).reshape(3, 3)
        translation = np.asarray(cond["translation"], dtype=np.float32)
        latent = torch.from_numpy(request.latent[None].copy()).to(self.device)
        ref = torch.from_numpy(request.ref_image[None].copy()).to(self.device)
        t = torch.tensor([request.timestep], device=self.device)
        with torch.no_grad():
            embedding = self.pipe.encode_camera(ref, rotation, translation)
            eps_cond = self.pipe.unet(latent, t, encoder_hidden_states=embedding).sample
            if request.guidance_scale != 1.0:
                eps_uncond = self.pipe.unet(
                    latent, t, encoder_hidden_states=torch.zeros_like(embedding)).sample
                out = cfg_combine(eps_uncond[0].cpu().numpy(),
                                  eps_cond[0].cpu().numpy(), request.guidance_scale)
            else:
                out = eps_cond[0].cpu().numpy()
        return out.astype(np.float32)


def make_backend(name: str, model_id: str | None = None, device: str = "cpu",
                 fixture_path: str | None = None):
    if name == "echo":
        return EchoBackend()
    if name == "fixture":
        if not fixture_path:
            raise BackendError("bad_config", "fixture backend needs --fixture PATH")
        return FixtureBackend(fixture_path)
    if name == "sd":
        kwargs = {"device": device}
        if model_id:
            kwargs["model_id"] = model_id
        return StableDiffusionBackend(**kwargs)
    if name == "zero123":
        kwargs = {"device": device}
        if model_id:
            kwargs["model_id"] = model_id
        return Zero123Backend(**kwargs)
    raise BackendError("bad_config", f"unknown backend {name!r}")
