"""Compiled inner loops for splatting and similarity scanning.

Determinism contract: every parallel loop iterates over a partition that
is fixed by the problem size alone (tiles, cells, fixed chunk count, or
offsets), and each iteration writes only its own slots. Results are
therefore bitwise-identical for any worker count.
"""

from __future__ import annotations

import warnings

import numpy as np
from numba import njit, prange
from numba.core.errors import NumbaWarning

warnings.filterwarnings("ignore", category=NumbaWarning)

TILE = 16
BACKWARD_CHUNKS = 32  # fixed, so the gradient reduction order never changes

# exp(-q) below this is < 1e-307 and cannot move a float64 accumulator
_Q_UNDERFLOW = 708.0


@njit(cache=True)
def fill_tile_entries(tr0, tr1, tc0, tc1, offsets, n_tiles_c, tile_ids, entry_idx):
    """Expand per-splat tile rects into (tile_id, splat) entry arrays."""
    n = tr0.shape[0]
    for j in range(n):
        pos = offsets[j]
        for tr in range(tr0[j], tr1[j] + 1):
            for tc in range(tc0[j], tc1[j] + 1):
                tile_ids[pos] = tr * n_tiles_c + tc
                entry_idx[pos] = j
                pos += 1


@njit(cache=True, parallel=True)
def forward_tiled(
    mean_r,
    mean_c,
    con_a,
    con_b,
    con_c,
    opac,
    feats,
    confs,
    cull_r2,
    tile_starts,
    entries,
    size,
    n_tiles_c,
    alpha_clamp,
    alpha_floor,
    t_floor,
    f_out,
    c_out,
    t_out,
):
    n_tiles = tile_starts.shape[0] - 1
    n_ch = feats.shape[1]
    for t in prange(n_tiles):
        tile_r = (t // n_tiles_c) * TILE
        tile_c = (t % n_tiles_c) * TILE
        lo = tile_starts[t]
        hi = tile_starts[t + 1]
        for r in range(tile_r, min(tile_r + TILE, size)):
            for c in range(tile_c, min(tile_c + TILE, size)):
                trans = 1.0
                for e in range(lo, hi):
                    j = entries[e]
                    dr = r - mean_r[j]
                    dc = c - mean_c[j]
                    d2 = dr * dr + dc * dc
                    if d2 > cull_r2[j]:
                        continue
                    q = 0.5 * (con_a[j] * dr * dr + con_c[j] * dc * dc) + con_b[j] * dr * dc
                    if q < 0.0 or q > _Q_UNDERFLOW:
                        continue
                    alpha = opac[j] * np.exp(-q)
                    if alpha > alpha_clamp:
                        alpha = alpha_clamp
                    if alpha < alpha_floor:
                        continue
                    w = alpha * trans
                    for ch in range(n_ch):
                        f_out[r, c, ch] += feats[j, ch] * w
                    c_out[r, c] += confs[j] * w
                    trans *= 1.0 - alpha
                    if trans < t_floor:
                        break
                t_out[r, c] = trans


@njit(cache=True, parallel=True)
def forward_reference(
    mean_r,
    mean_c,
    con_a,
    con_b,
    con_c,
    opac,
    feats,
    confs,
    size,
    alpha_clamp,
    f_out,
    c_out,
    t_out,
):
    n = mean_r.shape[0]
    n_ch = feats.shape[1]
    for cell in prange(size * size):
        r = cell // size
        c = cell % size
        trans = 1.0
        for j in range(n):
            dr = r - mean_r[j]
            dc = c - mean_c[j]
            q = 0.5 * (con_a[j] * dr * dr + con_c[j] * dc * dc) + con_b[j] * dr * dc
            if q < 0.0 or q > _Q_UNDERFLOW:
                continue
            alpha = opac[j] * np.exp(-q)
            if alpha > alpha_clamp:
                alpha = alpha_clamp
            w = alpha * trans
            for ch in range(n_ch):
                f_out[r, c, ch] += feats[j, ch] * w
            c_out[r, c] += confs[j] * w
            trans *= 1.0 - alpha
        t_out[r, c] = trans


@njit(cache=True, parallel=True)
def backward_tiled(
    mean_r,
    mean_c,
    con_a,
    con_b,
    con_c,
    opac,
    feats,
    confs,
    cull_r2,
    tile_starts,
    entries,
    size,
    n_tiles_c,
    alpha_clamp,
    alpha_floor,
    t_floor,
    dl_df,
    dl_dc,
    g_feat,
    g_conf,
    g_opac,
    g_mean,
    g_conic,
):
    """Per-cell replay of the tiled forward, accumulating parameter gradients.

    Gradients land in fixed per-chunk buffers (chunk = contiguous tile
    range); the caller sums over the chunk axis.
    """
    n_tiles = tile_starts.shape[0] - 1
    n_ch = feats.shape[1]
    for chunk in prange(BACKWARD_CHUNKS):
        t_lo = chunk * n_tiles // BACKWARD_CHUNKS
        t_hi = (chunk + 1) * n_tiles // BACKWARD_CHUNKS
        acc_f = np.empty(n_ch, dtype=np.float64)
        for t in range(t_lo, t_hi):
            tile_r = (t // n_tiles_c) * TILE
            tile_c = (t % n_tiles_c) * TILE
            lo = tile_starts[t]
            hi = tile_starts[t + 1]
            if hi == lo:
                continue
            for r in range(tile_r, min(tile_r + TILE, size)):
                for c in range(tile_c, min(tile_c + TILE, size)):
                    # pass 1: replay the forward traversal to find the final
                    # transmittance and the last contributing entry
                    trans = 1.0
                    last = -1
                    for e in range(lo, hi):
                        j = entries[e]
                        dr = r - mean_r[j]
                        dc = c - mean_c[j]
                        if dr * dr + dc * dc > cull_r2[j]:
                            continue
                        q = 0.5 * (con_a[j] * dr * dr + con_c[j] * dc * dc) + con_b[j] * dr * dc
                        if q < 0.0 or q > _Q_UNDERFLOW:
                            continue
                        alpha = opac[j] * np.exp(-q)
                        if alpha > alpha_clamp:
                            alpha = alpha_clamp
                        if alpha < alpha_floor:
                            continue
                        trans *= 1.0 - alpha
                        last = e
                        if trans < t_floor:
                            break
                    if last < 0:
                        continue
                    # pass 2: back to front, rebuilding T_b and the
                    # composited-behind accumulators
                    for ch in range(n_ch):
                        acc_f[ch] = 0.0
                    acc_c = 0.0
                    t_run = trans
                    for e in range(last, lo - 1, -1):
                        j = entries[e]
                        dr = r - mean_r[j]
                        dc = c - mean_c[j]
                        if dr * dr + dc * dc > cull_r2[j]:
                            continue
                        q = 0.5 * (con_a[j] * dr * dr + con_c[j] * dc * dc) + con_b[j] * dr * dc
                        if q < 0.0 or q > _Q_UNDERFLOW:
                            continue
                        g = np.exp(-q)
                        raw_alpha = opac[j] * g
                        clamped = raw_alpha >= alpha_clamp
                        alpha = alpha_clamp if clamped else raw_alpha
                        if alpha < alpha_floor:
                            continue
                        t_b = t_run / (1.0 - alpha)
                        w = alpha * t_b
                        d_alpha = 0.0
                        for ch in range(n_ch):
                            up = dl_df[r, c, ch]
                            g_feat[chunk, j, ch] += up * w
                            d_alpha += up * t_b * (feats[j, ch] - acc_f[ch])
                        up_c = dl_dc[r, c]
                        g_conf[chunk, j] += up_c * w
                        d_alpha += up_c * t_b * (confs[j] - acc_c)
                        if not clamped:
                            g_opac[chunk, j] += d_alpha * g
                            dq = -alpha * d_alpha  # d_alpha * opac * dg/dq, dg/dq = -g
                            g_mean[chunk, j, 0] += -dq * (con_a[j] * dr + con_b[j] * dc)
                            g_mean[chunk, j, 1] += -dq * (con_b[j] * dr + con_c[j] * dc)
                            g_conic[chunk, j, 0] += dq * 0.5 * dr * dr
                            g_conic[chunk, j, 1] += dq * dr * dc
                            g_conic[chunk, j, 2] += dq * 0.5 * dc * dc
                        for ch in range(n_ch):
                            acc_f[ch] = alpha * feats[j, ch] + (1.0 - alpha) * acc_f[ch]
                        acc_c = alpha * confs[j] + (1.0 - alpha) * acc_c
                        t_run = t_b


@njit(cache=True, parallel=True)
def similarity_scan(sat, bev, radius, out):
    """Windowed cosine similarity over integer translations in [-R, R]^2.

    ``sat`` and ``bev`` are [S, S, C]; norms are taken over the same
    overlap support as the inner product, and offsets where either norm
    falls below 1e-12 score zero.
    """
    size = sat.shape[0]
    n_ch = sat.shape[2]
    width = 2 * radius + 1
    for k in prange(width * width):
        off_r = k // width - radius
        off_c = k % width - radius
        r_lo = max(0, -off_r)
        r_hi = min(size, size - off_r)
        c_lo = max(0, -off_c)
        c_hi = min(size, size - off_c)
        num = 0.0
        sat_sq = 0.0
        bev_sq = 0.0
        for r in range(r_lo, r_hi):
            for c in range(c_lo, c_hi):
                for ch in range(n_ch):
                    fs = sat[r + off_r, c + off_c, ch]
                    fb = bev[r, c, ch]
                    num += fs * fb
                    sat_sq += fs * fs
                    bev_sq += fb * fb
        sat_n = np.sqrt(sat_sq)
        bev_n = np.sqrt(bev_sq)
        if sat_n < 1e-12 or bev_n < 1e-12:
            out[k // width, k % width] = 0.0
        else:
            out[k // width, k % width] = num / (sat_n * bev_n)
