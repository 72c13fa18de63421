"""Scene representation: Gaussian cloud, pinhole cameras, image buffers.

The cloud keeps unconstrained internal parameters (log-scales, pre-sigmoid
opacities and colors, unnormalized quaternions) so plain gradient steps can
never violate the public invariants; the public accessors apply the
activations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

_LOGIT_EPS = 1e-12


def sigmoid(x):
    with np.errstate(over="ignore"):  # exp overflow saturates correctly to 0
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


def _qnorm(q: np.ndarray) -> np.ndarray:
    # explicit elementwise form: identical rounding for batched and single rows
    return np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2 + q[..., 2] ** 2 + q[..., 3] ** 2)[..., None]

# Norms this close to 1 count as already unit; one division always lands well
# inside this window (error is a few ulp), which makes normalization bitwise
# idempotent without chasing the non-convergent fixed point of x -> x/|x|.
_UNIT_NORM_WINDOW = 1e-12


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions; bitwise idempotent."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = q.reshape(-1, 4)
    norm = _qnorm(q2)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion with zero or non-finite norm")
    out = np.where(np.abs(norm - 1.0) <= _UNIT_NORM_WINDOW, q2, q2 / norm)
    return out[0] if single else out.reshape(q.shape)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z). Shape (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_wrt_quat(q: np.ndarray) -> np.ndarray:
    """dR/dq for a unit quaternion, shape (4, 3, 3); component order (w, x, y, z)."""
    w, x, y, z = float(q[0]), float(q[1]), float(q[2]), float(q[3])
    dRdw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dRdx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dRdy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dRdz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dRdw, dRdx, dRdy, dRdz])


def covariance_from_params(scale, rotation) -> np.ndarray:
    """3x3 covariance R * diag(s)^2 * R^T from a scale 3-vector and unit quaternion."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if scale.shape != (3,) or rotation.shape != (4,):
        raise InvalidParameterError("scale must be a 3-vector and rotation a quaternion")
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite covariance parameters")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale components must be positive")
    if abs(np.linalg.norm(rotation) - 1.0) > 1e-6:
        raise InvalidParameterError("rotation quaternion must be unit-norm")
    R = quat_to_rotmat(rotation)
    M = R * scale[None, :]  # R @ diag(s)
    return M @ M.T


def query_gaussian(p, mu, cov) -> float:
    """Evaluate exp(-1/2 (p-mu)^T cov^-1 (p-mu)); 1.0 exactly at the center."""
    from .errors import DegenerateCovarianceError

    p = np.asarray(p, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.cond(cov) >= 1e12:
        raise DegenerateCovarianceError("covariance condition number >= 1e12")
    d = p - mu
    m = d @ np.linalg.solve(cov, d)
    return float(np.exp(-0.5 * m))


@dataclass
class ImageBuffer:
    """Row-major float image in [0, 1], channels last; channels in {1, 3, 4}."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3, 4):
            raise InvalidParameterError(f"bad image shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("non-finite image values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class MaskedImage:
    """RGB image plus a binary foreground mask of the same size."""

    image: ImageBuffer
    mask: ImageBuffer

    def __post_init__(self):
        if self.image.channels != 3 or self.mask.channels != 1:
            raise InvalidParameterError("expected 3-channel image and 1-channel mask")
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise InvalidParameterError("image and mask dimensions differ")
        # Binarize at 0.5 so downstream code can rely on {0, 1} values.
        self.mask = ImageBuffer((self.mask.data >= 0.5).astype(np.float64))


class GaussianCloud:
    """Learnable splat set; arrays share length K.

    Internal storage is unconstrained: `log_scales` (scales = exp),
    `opacity_logits` / `color_logits` (values = sigmoid), raw quaternions
    normalized on read and after every optimizer step.
    """

    def __init__(self, positions, log_scales, rotations, color_logits, opacity_logits):
        self.positions = np.atleast_2d(np.asarray(positions, dtype=np.float64)).reshape(-1, 3)
        k = len(self.positions)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(k, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(k, 4)
        self.color_logits = np.asarray(color_logits, dtype=np.float64).reshape(k, 3)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(k)
        for name in ("positions", "log_scales"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite {name}")
        # +-inf logits encode exact 0/1 colors and opacities; only NaN is invalid
        for name in ("color_logits", "opacity_logits"):
            if np.any(np.isnan(getattr(self, name))):
                raise InvalidParameterError(f"NaN in {name}")
        self.normalize_rotations()

    @classmethod
    def from_values(cls, positions, scales, rotations, colors, opacities) -> "GaussianCloud":
        """Build from constrained values (positive scales, colors/opacities in [0, 1])."""
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise InvalidParameterError("scales must be strictly positive")
        return cls(positions, np.log(scales), rotations, logit(colors), logit(opacities))

    @classmethod
    def empty(cls) -> "GaussianCloud":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), z, np.zeros(0))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def normalize_rotations(self) -> None:
        """Restore the unit-norm invariant; call after every parameter update."""
        if len(self):
            self.rotations = normalize_quaternions(self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.color_logits.copy(),
            self.opacity_logits.copy(),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Live views of the unconstrained parameter groups (mutating them mutates the cloud)."""
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "color_logits": self.color_logits,
            "opacity_logits": self.opacity_logits,
        }


@dataclass
class Camera:
    """Orbit-parameterized pinhole camera.

    Azimuth is measured counterclockwise from +x in the horizontal (xy)
    plane, elevation above the horizon (+z up); the camera looks at
    `look_at` from `distance` away. Image x is right, y is down.
    """

    azimuth: float
    elevation: float
    distance: float
    fov_y: float = 49.1
    width: int = 64
    height: int = 64
    look_at: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01

    def __post_init__(self):
        self.look_at = np.asarray(self.look_at, dtype=np.float64).reshape(3)
        if not (0.0 < self.fov_y < 180.0):
            raise InvalidParameterError("fov_y must lie in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be >= 1")
        if self.distance <= 0:
            raise InvalidParameterError("camera distance must be positive")

    @property
    def position(self) -> np.ndarray:
        az = math.radians(self.azimuth)
        el = math.radians(self.elevation)
        direction = np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        return self.look_at + self.distance * direction

    def view_matrix(self) -> np.ndarray:
        """World-to-camera 4x4; rows of the rotation block are right/down/forward."""
        pos = self.position
        forward = self.look_at - pos
        forward = forward / np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 1.0 - 1e-9:  # looking straight up/down
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        V = np.eye(4)
        V[:3, :3] = R
        V[:3, 3] = -R @ pos
        return V

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * math.radians(self.fov_y))

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * (self.width - 1), 0.5 * (self.height - 1)


class MatrixCamera:
    """Pinhole camera posed by an explicit world-to-camera matrix.

    Duck-compatible with Camera for rendering; used when a pose arrives as a
    relative transform instead of orbit angles.
    """

    def __init__(self, view, fov_y: float = 49.1, width: int = 64, height: int = 64,
                 near: float = 0.01):
        self._view = np.asarray(view, dtype=np.float64).reshape(4, 4)
        self.fov_y = fov_y
        self.width = width
        self.height = height
        self.near = near

    def view_matrix(self) -> np.ndarray:
        return self._view.copy()

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * math.radians(self.fov_y))

    @property
    def principal_point(self) -> tuple[float, float]:
        return 0.5 * (self.width - 1), 0.5 * (self.height - 1)


def relative_view_transform(ref_cam, cam) -> tuple[np.ndarray, np.ndarray]:
    """(R, T) with view(cam) = [R|T] @ view(ref_cam); R is a proper rotation."""
    M = cam.view_matrix() @ np.linalg.inv(ref_cam.view_matrix())
    return M[:3, :3], M[:3, 3]


def view_from_relative(ref_cam, rotation, translation) -> np.ndarray:
    """Invert relative_view_transform back to a world-to-camera matrix."""
    M = np.eye(4)
    M[:3, :3] = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    M[:3, 3] = np.asarray(translation, dtype=np.float64).reshape(3)
    return M @ ref_cam.view_matrix()


def orbit_cameras(
    n_azimuth: int,
    elevations,
    distance: float,
    fov_y: float = 49.1,
    width: int = 64,
    height: int = 64,
    look_at=(0.0, 0.0, 0.0),
) -> list[Camera]:
    """Cameras on an orbit: `n_azimuth` uniform azimuths at each elevation."""
    elevations = list(elevations)
    if n_azimuth < 1:
        raise InvalidParameterError("n_azimuth must be >= 1")
    if not elevations:
        raise InvalidParameterError("need at least one elevation")
    cams = []
    for el in elevations:
        for i in range(n_azimuth):
            cams.append(
                Camera(
                    azimuth=360.0 * i / n_azimuth,
                    elevation=float(el),
                    distance=distance,
                    fov_y=fov_y,
                    width=width,
                    height=height,
                    look_at=np.asarray(look_at, dtype=np.float64),
                )
            )
    return cams
