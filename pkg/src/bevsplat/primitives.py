"""3D feature Gaussians from per-pixel depth, features, and raw attributes.

Each ground pixel i back-projects to a point and spawns ``n_p`` Gaussians
whose offsets/scales/rotations/opacities come from squashing a raw
attribute map; all Gaussians of a pixel share that pixel's feature vector
and confidence. Raw attribute maps are stored as [n_p, 11, H, W] with
channel order: 3 offset, 3 scale, 4 quaternion, 1 opacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .geometry import Camera, backproject_map

DEFAULT_N_P = 3
DEFAULT_MAX_OFFSET = 0.5  # meters
DEFAULT_MAX_SCALE = 0.5  # meters

RAW_CHANNELS = 11  # 3 offset + 3 scale + 4 quaternion + 1 opacity


@dataclass(frozen=True)
class RawAttributes:
    """Raw (pre-activation) per-pixel, per-slot primitive parameters."""

    data: np.ndarray  # [n_p, 11, H, W] float64

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != RAW_CHANNELS:
            raise ValueError(f"raw attributes must be [n_p, 11, H, W], got {self.data.shape}")

    @classmethod
    def zeros(cls, n_p: int, h: int, w: int) -> "RawAttributes":
        return cls(np.zeros((n_p, RAW_CHANNELS, h, w), dtype=np.float64))

    @property
    def n_p(self) -> int:
        return self.data.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @property
    def offset_raw(self) -> np.ndarray:
        return self.data[:, 0:3]

    @property
    def scale_raw(self) -> np.ndarray:
        return self.data[:, 3:6]

    @property
    def quat_raw(self) -> np.ndarray:
        return self.data[:, 6:10]

    @property
    def opacity_raw(self) -> np.ndarray:
        return self.data[:, 10]

    def flat(self) -> np.ndarray:
        """Primitive-ordered view [N, 11], N = H*W*n_p (pixel-major, slot-minor)."""
        n_p, ch, h, w = self.data.shape
        return self.data.transpose(2, 3, 0, 1).reshape(h * w * n_p, ch)


def degenerate_raw_attributes(
    n_p: int, h: int, w: int, scale: float = 0.1, max_scale: float = DEFAULT_MAX_SCALE
) -> RawAttributes:
    """Point-cloud-like configuration: opacity -> 1, fixed scale, zero offsets."""
    if not 0 < scale < max_scale:
        raise ValueError(f"scale must lie in (0, {max_scale}), got {scale}")
    raw = RawAttributes.zeros(n_p, h, w)
    raw.data[:, 3:6] = np.log(scale / (max_scale - scale))  # logit(scale/max_scale)
    raw.data[:, 6] = 1.0  # identity quaternion (w, x, y, z)
    raw.data[:, 10] = 40.0  # sigmoid saturates to 1
    return raw


@dataclass(frozen=True)
class ActivatedAttributes:
    """Activation outputs in primitive order [N, ...], with caches for backward."""

    offsets: np.ndarray  # [N, 3], bounded by max_offset
    scales: np.ndarray  # [N, 3], in (0, max_scale]
    quats: np.ndarray  # [N, 4], unit (w, x, y, z)
    opacities: np.ndarray  # [N], in (0, 1)
    max_offset: float
    max_scale: float
    _raw_flat: np.ndarray = field(repr=False)
    _quat_norms: np.ndarray = field(repr=False)


def activate_attributes(
    raw: RawAttributes,
    max_offset: float = DEFAULT_MAX_OFFSET,
    max_scale: float = DEFAULT_MAX_SCALE,
) -> ActivatedAttributes:
    """Squash raw values into bounded primitive parameters.

    offset = max_offset * tanh(raw); scale = max_scale * sigmoid(raw);
    opacity = sigmoid(raw); rotation = raw quaternion normalized (identity
    when its norm vanishes).
    """
    if max_offset <= 0 or max_scale <= 0:
        raise ValueError("max_offset and max_scale must be positive")
    if not np.all(np.isfinite(raw.data)):
        raise ValueError("raw attributes must be finite")
    flat = raw.flat()
    offsets = max_offset * np.tanh(flat[:, 0:3])
    scales = max_scale * expit(flat[:, 3:6])
    q = flat[:, 6:10]
    norms = np.linalg.norm(q, axis=1)
    degen = norms < 1e-12
    safe = np.where(degen, 1.0, norms)
    quats = q / safe[:, None]
    quats[degen] = (1.0, 0.0, 0.0, 0.0)
    opacities = expit(flat[:, 10])
    return ActivatedAttributes(
        offsets=offsets,
        scales=scales,
        quats=quats,
        opacities=opacities,
        max_offset=max_offset,
        max_scale=max_scale,
        _raw_flat=flat,
        _quat_norms=norms,
    )


def activate_backward(
    act: ActivatedAttributes,
    d_offsets: np.ndarray,
    d_scales: np.ndarray,
    d_quats: np.ndarray,
    d_opacities: np.ndarray,
    n_p: int,
    image_shape: tuple[int, int],
) -> RawAttributes:
    """Chain gradients on activated parameters back to raw attribute maps."""
    flat = act._raw_flat
    n = flat.shape[0]
    d_raw = np.zeros((n, RAW_CHANNELS), dtype=np.float64)
    t = np.tanh(flat[:, 0:3])
    d_raw[:, 0:3] = d_offsets * act.max_offset * (1.0 - t * t)
    s = expit(flat[:, 3:6])
    d_raw[:, 3:6] = d_scales * act.max_scale * s * (1.0 - s)
    # normalization backward: dq = (dqn - qn <qn, dqn>) / ||q||; zero at the
    # degenerate identity branch
    qn = act.quats
    norms = act._quat_norms
    ok = norms >= 1e-12
    inner = np.sum(qn * d_quats, axis=1, keepdims=True)
    d_q = np.where(ok[:, None], (d_quats - qn * inner) / np.where(ok, norms, 1.0)[:, None], 0.0)
    d_raw[:, 6:10] = d_q
    o = act.opacities
    d_raw[:, 10] = d_opacities * o * (1.0 - o)
    h, w = image_shape
    return RawAttributes(d_raw.reshape(h, w, n_p, RAW_CHANNELS).transpose(2, 3, 0, 1).copy())


def quat_to_rotmat(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices [N, 3, 3] from unit quaternions [N, 4] (w, x, y, z)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    r = np.empty((quats.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_backward(quats: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    """dL/d(unit quaternion) [N, 4] from dL/dR [N, 3, 3]."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    zero = np.zeros_like(w)
    # partials of R wrt each quaternion component, [N, 3, 3] each
    dw = 2 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(-1, 3, 3)
    dx = 2 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1
    ).reshape(-1, 3, 3)
    dy = 2 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=-1
    ).reshape(-1, 3, 3)
    dz = 2 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=-1
    ).reshape(-1, 3, 3)
    return np.stack(
        [np.sum(d_r * d, axis=(1, 2)) for d in (dw, dx, dy, dz)], axis=1
    )


def build_covariance(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(scale); accepts [3]/[4] or [N,3]/[N,4]."""
    single = np.asarray(scale).ndim == 1
    scales = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    quats = np.atleast_2d(np.asarray(rotation, dtype=np.float64))
    r = quat_to_rotmat(quats)
    m = r * scales[:, None, :]  # R @ diag(s)
    cov = m @ m.transpose(0, 2, 1)
    return cov[0] if single else cov


def covariance_backward(
    scales: np.ndarray, quats: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """dL/d(scale) [N, 3] and dL/d(unit quaternion) [N, 4] from dL/dSigma [N, 3, 3]."""
    r = quat_to_rotmat(quats)
    m = r * scales[:, None, :]
    d_m = (d_cov + d_cov.transpose(0, 2, 1)) @ m
    d_scales = np.einsum("nij,nij->nj", r, d_m)
    d_r = d_m * scales[:, None, :]
    return d_scales, rotmat_backward(quats, d_r)


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian carrying a feature vector and confidence."""

    mean: np.ndarray  # [3] meters
    scale: np.ndarray  # [3] meters, positive
    rotation: np.ndarray  # [4] unit quaternion
    opacity: float  # in [0, 1]
    feature: np.ndarray  # [C]
    confidence: float  # in [0, 1]
    source: tuple[int, int]  # (pixel index, slot)


class PrimitiveSet:
    """Ordered collection of Gaussians stored as packed arrays.

    Primitive order is pixel-major row-major and slot-minor: index
    ``(row*W + col)*n_p + slot``. Features and confidences are stored per
    pixel and shared by all of a pixel's slots.
    """

    def __init__(
        self,
        means: np.ndarray,
        scales: np.ndarray,
        quats: np.ndarray,
        opacities: np.ndarray,
        pixel_features: np.ndarray,
        pixel_confidences: np.ndarray,
        n_p: int,
        image_shape: tuple[int, int],
    ):
        n = means.shape[0]
        if not (scales.shape[0] == quats.shape[0] == opacities.shape[0] == n):
            raise ValueError("primitive arrays disagree in length")
        if pixel_features.shape[0] * n_p != n:
            raise ValueError("feature rows * n_p must equal primitive count")
        self.means = means
        self.scales = scales
        self.quats = quats
        self.opacities = opacities
        self.pixel_features = pixel_features
        self.pixel_confidences = pixel_confidences
        self.n_p = n_p
        self.image_shape = image_shape

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.pixel_features.shape[1]

    @property
    def pixel_index(self) -> np.ndarray:
        return np.arange(len(self)) // self.n_p

    @property
    def features(self) -> np.ndarray:
        """Per-primitive features [N, C] (pixel rows repeated per slot)."""
        return np.repeat(self.pixel_features, self.n_p, axis=0)

    @property
    def confidences(self) -> np.ndarray:
        return np.repeat(self.pixel_confidences, self.n_p)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        pix = i // self.n_p
        return GaussianPrimitive(
            mean=self.means[i],
            scale=self.scales[i],
            rotation=self.quats[i],
            opacity=float(self.opacities[i]),
            feature=self.pixel_features[pix],
            confidence=float(self.pixel_confidences[pix]),
            source=(pix, i % self.n_p),
        )


def generate_primitives(
    depth: np.ndarray,
    features: np.ndarray,
    confidences: np.ndarray,
    raw: RawAttributes,
    camera: Camera,
    n_p: int = DEFAULT_N_P,
    max_offset: float = DEFAULT_MAX_OFFSET,
    max_scale: float = DEFAULT_MAX_SCALE,
) -> PrimitiveSet:
    """Lift ground-view maps into a PrimitiveSet of n_p Gaussians per pixel.

    Args:
        depth: [H, W] meters, >= 0.
        features: [C, H, W].
        confidences: [H, W] in [0, 1].
        raw: raw attribute maps, [n_p, 11, H, W].
        camera: pinhole intrinsics or panorama geometry.

    Returns:
        PrimitiveSet with N = n_p * H * W primitives in deterministic order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    h, w = depth.shape
    if features.ndim != 3 or features.shape[1:] != (h, w):
        raise ValueError(f"features must be [C, {h}, {w}], got {features.shape}")
    if confidences.shape != (h, w):
        raise ValueError(f"confidences must be [{h}, {w}], got {confidences.shape}")
    if raw.n_p != n_p or raw.image_shape != (h, w):
        raise ValueError(
            f"raw attributes must be [{n_p}, 11, {h}, {w}], got {raw.data.shape}"
        )
    act = activate_attributes(raw, max_offset=max_offset, max_scale=max_scale)
    return assemble_primitives(act, depth, features, confidences, camera, n_p)


def assemble_primitives(
    act: ActivatedAttributes,
    depth: np.ndarray,
    features: np.ndarray,
    confidences: np.ndarray,
    camera: Camera,
    n_p: int,
) -> PrimitiveSet:
    """Bind activated attributes to back-projected pixels (see generate_primitives)."""
    depth = np.asarray(depth, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    h, w = depth.shape
    mu = backproject_map(camera, depth).reshape(h * w, 3)
    means = np.repeat(mu, n_p, axis=0) + act.offsets
    return PrimitiveSet(
        means=means,
        scales=act.scales,
        quats=act.quats,
        opacities=act.opacities,
        pixel_features=features.transpose(1, 2, 0).reshape(h * w, -1),
        pixel_confidences=confidences.reshape(h * w),
        n_p=n_p,
        image_shape=(h, w),
    )
