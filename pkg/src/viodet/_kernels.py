"""Compiled inner loops for the per-frame hot path (numba, cached to disk)."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_RAD2DEG = 180.0 / math.pi

_EMPTY = np.iinfo(np.int64).min
_OFFSET = 1 << 20
_MASK = (1 << 21) - 1


@njit(cache=True)
def cell_of(x, cs):
    return math.floor(x / cs)


@njit(cache=True)
def pack_cell(i, j, k):
    return ((i + _OFFSET) << 42) | ((j + _OFFSET) << 21) | (k + _OFFSET)


@njit(cache=True)
def _slot(keys, key):
    mask = keys.shape[0] - 1
    h = np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)
    s = np.int64(h >> np.uint64(40)) & mask
    while keys[s] != _EMPTY and keys[s] != key:
        s = (s + 1) & mask
    return s


@njit(cache=True)
def grid_insert(keys, heads, occ, n_occ, sp_next, idx, key):
    """Prepend superpoint ``idx`` to its cell chain; returns the occupied-cell count."""
    s = _slot(keys, key)
    if keys[s] == _EMPTY:
        keys[s] = key
        heads[s] = -1
        occ[n_occ] = key
        n_occ += 1
    sp_next[idx] = heads[s]
    heads[s] = idx
    return n_occ


@njit(cache=True)
def grid_rehash(occ, n_occ, old_keys, old_heads, size):
    keys = np.full(size, _EMPTY, dtype=np.int64)
    heads = np.full(size, -1, dtype=np.int64)
    for c in range(n_occ):
        key = occ[c]
        s = _slot(keys, key)
        keys[s] = key
        heads[s] = old_heads[_slot(old_keys, key)]
    return keys, heads


@njit(cache=True)
def grid_query(keys, heads, occ, n_occ, sp_next, cs, center, radius, out):
    """Ids in every cell touched by the ball; returns the count written to ``out``."""
    x0 = cell_of(center[0] - radius, cs)
    x1 = cell_of(center[0] + radius, cs)
    y0 = cell_of(center[1] - radius, cs)
    y1 = cell_of(center[1] + radius, cs)
    z0 = cell_of(center[2] - radius, cs)
    z1 = cell_of(center[2] + radius, cs)
    m = 0
    if (x1 - x0 + 1) * (y1 - y0 + 1) * (z1 - z0 + 1) > n_occ:
        # huge radius: walk the occupied cells instead of the cell range
        for c in range(n_occ):
            key = occ[c]
            i = ((key >> 42) & _MASK) - _OFFSET
            j = ((key >> 21) & _MASK) - _OFFSET
            k = (key & _MASK) - _OFFSET
            if x0 <= i <= x1 and y0 <= j <= y1 and z0 <= k <= z1:
                e = heads[_slot(keys, key)]
                while e >= 0:
                    out[m] = e
                    m += 1
                    e = sp_next[e]
        return m
    for i in range(x0, x1 + 1):
        for j in range(y0, y1 + 1):
            for k in range(z0, z1 + 1):
                s = _slot(keys, pack_cell(i, j, k))
                if keys[s] == _EMPTY:
                    continue
                e = heads[s]
                while e >= 0:
                    out[m] = e
                    m += 1
                    e = sp_next[e]
    return m



@njit(cache=True)
def box_medians(boxes, points, uv, valid, n_min):
    """Coordinate-wise median of the points strictly inside each (x, y, w, h) box.

    Returns (locs, counts); rows with fewer than ``n_min`` points are left NaN.
    """
    n_box = boxes.shape[0]
    n_pts = points.shape[0]
    locs = np.full((n_box, 3), np.nan)
    counts = np.zeros(n_box, dtype=np.int64)
    buf = np.empty(n_pts, dtype=np.int64)
    col = np.empty(n_pts)
    for b in range(n_box):
        x1 = boxes[b, 0]
        y1 = boxes[b, 1]
        x2 = x1 + boxes[b, 2]
        y2 = y1 + boxes[b, 3]
        k = 0
        for i in range(n_pts):
            if valid[i] and uv[i, 0] > x1 and uv[i, 0] < x2 and uv[i, 1] > y1 and uv[i, 1] < y2:
                buf[k] = i
                k += 1
        counts[b] = k
        if k < n_min:
            continue
        for axis in range(3):
            for j in range(k):
                col[j] = points[buf[j], axis]
            s = np.sort(col[:k])
            if k % 2 == 1:
                locs[b, axis] = s[k // 2]
            else:
                a = s[k // 2 - 1]
                c = s[k // 2]
                locs[b, axis] = a if a == c else (a + c) / 2
    return locs, counts


@njit(cache=True)
def fuse_observation(
    locs,
    n,
    scores,
    present,
    g_keys,
    g_heads,
    g_occ,
    g_n_occ,
    g_next,
    cs,
    loc,
    col,
    view,
    scale,
    p_l,
    fuse_r,
    create_r,
    k_s,
    s_cap,
    gate,
    cap_deg,
    reward,
    pooled,
    views,
    v_next,
    v_head,
    v_tail,
    nv,
    scales,
    s_next,
    s_head,
    s_tail,
    ns,
    updated,
):
    """Fuse one object point and return its map probability.

    Storage arrays must have room for ``n + 1`` more views and scales and
    one more superpoint; the caller inserts a created superpoint into the
    grid.  Writes the fused superpoint ids to
    ``updated`` and returns (n_updated, created_id or -1, v_diff, s_diff,
    E_in, p_map, nv, ns).
    """
    cand = np.empty(n, dtype=np.int64)
    n_cand = grid_query(g_keys, g_heads, g_occ, g_n_occ, g_next, cs, loc, fuse_r, cand)
    m = 0
    near_any = False
    dist = np.empty(n_cand)
    own_v = np.empty(n_cand)
    own_s = np.empty(n_cand)
    v_diff = np.inf
    s_diff = np.inf
    for c in range(n_cand):
        i = cand[c]
        dx = locs[i, 0] - loc[0]
        dy = locs[i, 1] - loc[1]
        dz = locs[i, 2] - loc[2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        if d > fuse_r:
            continue
        updated[m] = i
        dist[m] = d
        if d <= create_r:
            near_any = True
        best = np.inf
        e = v_head[i]
        while e >= 0:
            dot = views[e, 0] * view[0] + views[e, 1] * view[1] + views[e, 2] * view[2]
            cx = views[e, 1] * view[2] - views[e, 2] * view[1]
            cy = views[e, 2] * view[0] - views[e, 0] * view[2]
            cz = views[e, 0] * view[1] - views[e, 1] * view[0]
            ang = math.atan2(math.sqrt(cx * cx + cy * cy + cz * cz), dot) * _RAD2DEG
            if ang < best:
                best = ang
            e = v_next[e]
        own_v[m] = best
        if best < v_diff:
            v_diff = best
        best = np.inf
        e = s_head[i]
        while e >= 0:
            gap = float(abs(scales[e] - scale))
            if gap < best:
                best = gap
            e = s_next[e]
        own_s[m] = best
        if best < s_diff:
            s_diff = best
        m += 1

    if v_diff < gate:
        w_v = 0.0
    elif v_diff <= cap_deg:
        w_v = (v_diff - gate) / (cap_deg - gate)
    else:
        w_v = 1.0
    w_s = k_s * s_diff if s_diff < s_cap else 1.0
    E_in = (w_v + w_s) / 2 * p_l

    for j in range(m):
        i = updated[j]
        bonus = reward if dist[j] <= create_r else 0.0
        scores[i, col] = (scores[i, col] + E_in) + bonus
        present[i, col] = True
        add_view = v_diff >= gate if pooled else own_v[j] >= gate
        add_scale = s_diff >= 1.0 if pooled else own_s[j] >= 1.0
        if add_view:
            views[nv, 0] = view[0]
            views[nv, 1] = view[1]
            views[nv, 2] = view[2]
            v_next[nv] = -1
            if v_tail[i] >= 0:
                v_next[v_tail[i]] = nv
            else:
                v_head[i] = nv
            v_tail[i] = nv
            nv += 1
        if add_scale:
            scales[ns] = scale
            s_next[ns] = -1
            if s_tail[i] >= 0:
                s_next[s_tail[i]] = ns
            else:
                s_head[i] = ns
            s_tail[i] = ns
            ns += 1

    created = -1
    if not near_any:
        created = n
        locs[n, 0] = loc[0]
        locs[n, 1] = loc[1]
        locs[n, 2] = loc[2]
        scores[n, col] = E_in
        present[n, col] = True
        views[nv, 0] = view[0]
        views[nv, 1] = view[1]
        views[nv, 2] = view[2]
        v_next[nv] = -1
        v_head[n] = nv
        v_tail[n] = nv
        nv += 1
        scales[ns] = scale
        s_next[ns] = -1
        s_head[n] = ns
        s_tail[n] = ns
        ns += 1

    # probability over superpoints within create_r after fusion
    E_label = 0.0
    E_other = 0.0
    first = True
    n_labels = scores.shape[1]
    for j in range(m + (1 if created >= 0 else 0)):
        if j < m:
            if dist[j] > create_r:
                continue
            i = updated[j]
        else:
            i = created
        if first or scores[i, col] > E_label:
            E_label = scores[i, col]
            first = False
        for c2 in range(n_labels):
            if c2 != col and scores[i, c2] > E_other:
                E_other = scores[i, c2]
    if E_label >= E_other:
        p_map = 1.0 / (1.0 + math.exp(E_other - E_label))
    else:
        p_map = 0.5
    return m, created, v_diff, s_diff, E_in, p_map, nv, ns
