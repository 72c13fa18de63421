"""Noise schedule, DDIM stepping, classifier-free guidance, and the score
providers that stand in for pretrained diffusion backbones.

Latents are plain float arrays; score requests carry them channels-first
[C, H, W] to match the wire protocol. A provider is anything with
``predict(request) -> ndarray`` of the request's latent shape.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass, field

import numpy as np

from . import wire
from .errors import (
    BridgeTimeoutError,
    InvalidParameterError,
    InvalidTimestepError,
    MissingFixtureError,
    ProtocolError,
    ScheduleError,
    ShapeMismatchError,
)


@dataclass
class NoiseSchedule:
    """Cumulative-product schedule alpha_bar with a per-step distillation weight."""

    alpha_bar: np.ndarray
    weight_mode: str = "one_minus_alpha_bar"  # or "constant"

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.ndim != 1 or len(self.alpha_bar) < 1:
            raise ScheduleError("alpha_bar must be a nonempty 1D sequence")
        if self.alpha_bar[0] < 0.999:
            raise ScheduleError("alpha_bar[0] must be >= 0.999")
        if np.any(self.alpha_bar <= 0) or np.any(self.alpha_bar > 1):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")

    @classmethod
    def linear_beta(cls, num_steps: int = 1000, beta_start: float = 8.5e-4,
                    beta_end: float = 1.2e-2, weight_mode: str = "one_minus_alpha_bar"):
        betas = np.linspace(beta_start, beta_end, num_steps)
        return cls(np.cumprod(1.0 - betas), weight_mode)

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar)

    def check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise InvalidTimestepError(f"timestep {t} outside [0, {self.num_steps})")
        return t

    def omega(self, t: int) -> float:
        t = self.check(t)
        if self.weight_mode == "constant":
            return 1.0
        return float(1.0 - self.alpha_bar[t])


def add_noise(z: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: sqrt(ab_t) * z + sqrt(1 - ab_t) * eps."""
    t = sched.check(t)
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise InvalidParameterError(f"latent {z.shape} and noise {eps.shape} shapes differ")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule) -> np.ndarray:
    """Deterministic denoising step from t to t_prev (eta = 0)."""
    t = sched.check(t)
    t_prev = sched.check(t_prev)
    if t_prev > t:
        raise InvalidTimestepError("t_prev must not exceed t")
    if t_prev == t:
        return np.array(z_t, dtype=np.float64, copy=True)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    if ab_t <= 0:
        raise ScheduleError("alpha_bar must be positive for denoising")
    z0 = (z_t - np.sqrt(1.0 - ab_t) * eps_pred) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * eps_pred


def ddim_invert_to_clean(z_t: np.ndarray, eps: np.ndarray, t: int,
                         sched: NoiseSchedule) -> np.ndarray:
    """Recover the clean latent assuming `eps` is the injected noise."""
    t = sched.check(t)
    ab_t = sched.alpha_bar[t]
    return (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond)."""
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise InvalidParameterError("guidance branches must share a shape")
    if scale == 0.0:
        return eps_uncond.copy()
    if scale == 1.0:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class Unconditional:
    pass


@dataclass(frozen=True)
class TextEmbedding:
    embedding: tuple


class ViewCondition:
    """Reference image plus the relative rotation/translation to the target view."""

    def __init__(self, ref_image, rotation, translation):
        self.ref_image = np.asarray(ref_image, dtype=np.float64)
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise InvalidParameterError("view rotation must be orthonormal")


Conditioning = Unconditional | TextEmbedding | ViewCondition


@dataclass
class ScoreRequest:
    latent: np.ndarray          # [C, H, W]
    timestep: int
    conditioning: Conditioning = field(default_factory=Unconditional)
    guidance_scale: float = 1.0


@dataclass
class ScoreResponse:
    noise: np.ndarray


class SyntheticGaussianProvider:
    """Exact denoiser for a point-mass data distribution.

    eps_hat(z_t, t) = (z_t - sqrt(ab_t) * target) / sqrt(1 - ab_t), the
    optimal prediction when every clean sample equals `target`; the
    distillation residual then points from the current latent straight at
    the target. `target_fn(request)` makes the target view-dependent.
    """

    def __init__(self, sched: NoiseSchedule, target: np.ndarray | None = None,
                 target_fn=None):
        if (target is None) == (target_fn is None):
            raise InvalidParameterError("provide exactly one of target / target_fn")
        if target is not None and not np.all(np.isfinite(target)):
            raise InvalidParameterError("target latent must be finite")
        self.sched = sched
        self.target = None if target is None else np.asarray(target, dtype=np.float64)
        self.target_fn = target_fn
        self.last_undefined = False

    def predict(self, request: ScoreRequest) -> np.ndarray:
        t = self.sched.check(request.timestep)
        ab = self.sched.alpha_bar[t]
        target = self.target if self.target_fn is None else self.target_fn(request)
        if target.shape != np.asarray(request.latent).shape:
            raise ShapeMismatchError(
                f"target shape {target.shape} != latent {np.asarray(request.latent).shape}"
            )
        if 1.0 - ab <= 0.0:
            self.last_undefined = True
            return np.zeros_like(target)
        self.last_undefined = False
        return (np.asarray(request.latent, dtype=np.float64) - np.sqrt(ab) * target) \
            / np.sqrt(1.0 - ab)


def synthetic_gaussian_provider(target: np.ndarray, sched: NoiseSchedule) -> SyntheticGaussianProvider:
    return SyntheticGaussianProvider(sched, target=target)


class FixtureProvider:
    """Replays recorded responses keyed by the canonical request digest."""

    def __init__(self, path):
        self.path = str(path)
        with np.load(self.path) as archive:
            self.responses = {key: archive[key] for key in archive.files}

    def predict(self, request: ScoreRequest) -> np.ndarray:
        digest = wire.request_digest(request)
        try:
            stored = self.responses[digest]
        except KeyError:
            raise MissingFixtureError(f"no fixture for request {digest[:16]}…") from None
        if stored.shape != tuple(np.asarray(request.latent).shape):
            raise ShapeMismatchError(
                f"fixture shape {stored.shape} != latent {np.asarray(request.latent).shape}"
            )
        return stored.astype(np.float64)


def record_fixture(provider, requests, path) -> None:
    """Capture provider responses for later exact replay (float32 archive)."""
    entries = {}
    for request in requests:
        entries[wire.request_digest(request)] = np.asarray(
            provider.predict(request), dtype=np.float32
        )
    np.savez(path, **entries)


def fixture_provider(path) -> FixtureProvider:
    return FixtureProvider(path)


class RemoteProvider:
    """Forwards score requests over the wire protocol to a bridge process."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        host, _, port = endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidParameterError(f"endpoint must be host:port, got {endpoint!r}")
        self.endpoint = (host, int(port))
        self.timeout = timeout
        self._sock = None
        self._stream = None

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.endpoint, timeout=self.timeout)
            except socket.timeout as exc:
                raise BridgeTimeoutError(f"connect to {self.endpoint} timed out") from exc
            self._stream = self._sock.makefile("rwb")
        return self._stream

    def predict(self, request: ScoreRequest) -> np.ndarray:
        stream = self._connect()
        try:
            stream.write(wire.encode_request(request))
            stream.flush()
            return wire.read_response(stream, np.asarray(request.latent).shape)
        except (socket.timeout, TimeoutError) as exc:
            self.close()
            raise BridgeTimeoutError(f"score endpoint {self.endpoint} timed out") from exc
        except (ShapeMismatchError, ProtocolError):
            raise
        except OSError as exc:
            self.close()
            raise ProtocolError(f"transport failure: {exc}") from exc

    def close(self):
        if self._sock is not None:
            try:
                self._stream.close()
                self._sock.close()
            except OSError:
                pass
            self._sock = None
            self._stream = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_provider(endpoint: str, timeout: float = 30.0) -> RemoteProvider:
    return RemoteProvider(endpoint, timeout)
