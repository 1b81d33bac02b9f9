"""Confidence-weighted cosine similarity between satellite and BEV features.

The similarity field is indexed by integer cell translations
(delta_row, delta_col) in [-R, R]^2; for each translation the cosine is
taken over the overlap of the two equally-sized maps, with both norms
computed on that same support so border offsets stay unbiased. The peak
location, scaled by the ground resolution beta, is the pose estimate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _kernels
from .tensor_io import load_tensor, save_tensor

NORM_EPS = 1e-12


@dataclass(frozen=True)
class SimilarityMap:
    values: np.ndarray  # [(2R+1), (2R+1)], indexed by (dr + R, dc + R)
    search_radius: int
    beta: float  # meters per cell

    def value_at(self, offset: tuple[int, int]) -> float:
        r, c = offset
        return float(self.values[r + self.search_radius, c + self.search_radius])


@dataclass(frozen=True)
class PeakResult:
    offset: tuple[int, int]  # (delta_row, delta_col) cells
    value: float
    offset_m: tuple[float, float]  # (delta_z, delta_x) meters


def weight_features(f_bev: np.ndarray, c_bev: np.ndarray) -> np.ndarray:
    """Per-channel confidence weighting, C_bev * F_bev."""
    f_bev = np.asarray(f_bev, dtype=np.float64)
    c_bev = np.asarray(c_bev, dtype=np.float64)
    if f_bev.ndim != 3 or f_bev.shape[1:] != c_bev.shape:
        raise ValueError(f"shape mismatch: features {f_bev.shape} vs confidence {c_bev.shape}")
    return f_bev * c_bev[None, :, :]


def weight_features_backward(
    f_bev: np.ndarray, c_bev: np.ndarray, d_weighted: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Product-rule gradients: returns (dL/df_bev, dL/dc_bev)."""
    d_f = d_weighted * c_bev[None, :, :]
    d_c = np.sum(d_weighted * f_bev, axis=0)
    return d_f, d_c


def similarity_map(
    f_sat: np.ndarray, f_bev_w: np.ndarray, r: int, beta: float
) -> SimilarityMap:
    """Exhaustive translation scan of windowed cosine similarity.

    Args:
        f_sat: satellite features [C, S, S].
        f_bev_w: confidence-weighted BEV features [C, S, S].
        r: search radius in cells, at most S - 1.
        beta: ground resolution, m/cell.
    """
    f_sat = np.asarray(f_sat, dtype=np.float64)
    f_bev_w = np.asarray(f_bev_w, dtype=np.float64)
    if f_sat.shape != f_bev_w.shape or f_sat.ndim != 3:
        raise ValueError(f"map shapes must match, got {f_sat.shape} vs {f_bev_w.shape}")
    size = f_sat.shape[1]
    if r > size - 1:
        raise ValueError(f"search radius {r} exceeds map size {size} - 1")
    if r < 0:
        raise ValueError("search radius must be >= 0")
    out = np.empty((2 * r + 1, 2 * r + 1), dtype=np.float64)
    _kernels.similarity_scan(
        np.ascontiguousarray(f_sat.transpose(1, 2, 0)),
        np.ascontiguousarray(f_bev_w.transpose(1, 2, 0)),
        r,
        out,
    )
    return SimilarityMap(values=out, search_radius=r, beta=beta)


def similarity_at(f_sat: np.ndarray, f_bev_w: np.ndarray, offset: tuple[int, int]) -> float:
    """Cosine score of a single translation (numpy path, used by backward)."""
    (sat, bev), _ = _overlap(f_sat, f_bev_w, offset)
    num = float(np.sum(sat * bev))
    ns = float(np.linalg.norm(sat))
    nb = float(np.linalg.norm(bev))
    if ns < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return num / (ns * nb)


def _overlap(f_sat, f_bev_w, offset):
    dr, dc = offset
    size = f_sat.shape[1]
    r_lo, r_hi = max(0, -dr), min(size, size - dr)
    c_lo, c_hi = max(0, -dc), min(size, size - dc)
    sat = f_sat[:, r_lo + dr : r_hi + dr, c_lo + dc : c_hi + dc]
    bev = f_bev_w[:, r_lo:r_hi, c_lo:c_hi]
    return (sat, bev), (r_lo, r_hi, c_lo, c_hi)


def similarity_backward(
    f_sat: np.ndarray, f_bev_w: np.ndarray, offset: tuple[int, int], d_value: float
) -> np.ndarray:
    """dL/df_bev_w for one translation's cosine score scaled by ``d_value``."""
    out = np.zeros_like(f_bev_w)
    (sat, bev), (r_lo, r_hi, c_lo, c_hi) = _overlap(f_sat, f_bev_w, offset)
    num = float(np.sum(sat * bev))
    ns = float(np.linalg.norm(sat))
    nb = float(np.linalg.norm(bev))
    if ns < NORM_EPS or nb < NORM_EPS:
        return out
    p = num / (ns * nb)
    out[:, r_lo:r_hi, c_lo:c_hi] = d_value * (sat / (ns * nb) - p * bev / (nb * nb))
    return out


def peak(m: SimilarityMap) -> PeakResult:
    """Maximum of the similarity field; ties go to the smallest row-major index."""
    if m.values.size == 0:
        raise ValueError("empty similarity map")
    flat = int(np.argmax(m.values))
    width = m.values.shape[1]
    dr = flat // width - m.search_radius
    dc = flat % width - m.search_radius
    return PeakResult(
        offset=(dr, dc),
        value=float(m.values.reshape(-1)[flat]),
        offset_m=(dr * m.beta, dc * m.beta),
    )


def rotation_search(
    f_sat: np.ndarray,
    f_bev_w: np.ndarray,
    r: int,
    beta: float,
    n_angles: int,
) -> tuple[float, SimilarityMap, PeakResult]:
    """Exhaustive orientation grid: rotate the BEV map, keep the best peak.

    Plumbing for queries whose orientation is not already aligned; rotation
    is bilinear about the map center in steps of 360/n_angles degrees.
    Returns (angle_deg, similarity map, peak) of the winning rotation.
    """
    if n_angles < 1:
        raise ValueError("n_angles must be >= 1")
    best = None
    for k in range(n_angles):
        angle = 360.0 * k / n_angles
        if angle == 0.0:
            rotated = f_bev_w
        else:
            rotated = np.stack(
                [
                    ndimage.rotate(ch, angle, reshape=False, order=1, mode="constant")
                    for ch in f_bev_w
                ]
            )
        m = similarity_map(f_sat, rotated, r, beta)
        p = peak(m)
        if best is None or p.value > best[2].value:
            best = (angle, m, p)
    return best


def save_similarity_map(path: str | Path, m: SimilarityMap) -> None:
    """Write values as `.bvt` plus a JSON sidecar {r, beta}."""
    path = Path(path)
    save_tensor(path, m.values)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"r": m.search_radius, "beta": m.beta}))


def load_similarity_map(path: str | Path) -> SimilarityMap:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return SimilarityMap(
        values=load_tensor(path), search_radius=int(meta["r"]), beta=float(meta["beta"])
    )
