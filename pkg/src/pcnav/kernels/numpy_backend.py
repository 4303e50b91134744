"""Pure-numpy reference implementations of the hot kernels.

These are the semantics-defining twins of ``numba_backend``: every function here
must produce the same outputs (bitwise where feasible) as its compiled
counterpart.  They are selected at import time when ``PCNAV_NUMBA=0`` or when
numba is unavailable, and they are what ``pcnav bench`` compares against.

Conventions shared by both backends:

* occupancy grids are ``uint8`` arrays indexed ``occ[iy, ix]`` (1 = wall),
  cell (ix, iy) covering ``[ix*cell, (ix+1)*cell) x [iy*cell, (iy+1)*cell)``
  in world meters;
* walls are the full-height extrusion ``z in [0, wall_height]`` of their cell;
* rays parameterize points as ``origin + t * dir`` where ``dir`` is the
  camera-frame pixel direction rotated into the world, with camera-frame
  z-component exactly 1, so the parameter ``t`` *is* the camera-frame depth.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def raycast_depth(occ, cell, wall_height, has_ceiling, cam_pos, rot,
                  fx, fy, cx, cy, width, height, min_depth, max_depth):
    """Render a depth image by 2D DDA grid traversal lifted to 3D walls.

    ``rot`` maps camera-frame directions to world-frame directions.  Returns a
    float32 (height, width) image; invalid (no hit inside [min_depth,
    max_depth]) pixels are 0.0.
    """
    ny, nx = occ.shape
    vs, us = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    dcx = ((us - cx) / fx).ravel()
    dcy = ((vs - cy) / fy).ravel()
    # Explicit component products (not BLAS) so both backends share arithmetic.
    dwx = rot[0, 0] * dcx + rot[0, 1] * dcy + rot[0, 2]
    dwy = rot[1, 0] * dcx + rot[1, 1] * dcy + rot[1, 2]
    dwz = rot[2, 0] * dcx + rot[2, 1] * dcy + rot[2, 2]
    n = dwx.size
    ox, oy, oz = cam_pos[0], cam_pos[1], cam_pos[2]

    # Horizontal-plane hits (floor z=0, optional ceiling z=wall_height).
    t_plane = np.full(n, np.inf)
    desc = dwz < 0.0
    t_plane[desc] = (0.0 - oz) / dwz[desc]
    if has_ceiling:
        asc = dwz > 0.0
        t_plane[asc] = (wall_height - oz) / dwz[asc]

    ix = np.full(n, np.int64(np.floor(ox / cell)))
    iy = np.full(n, np.int64(np.floor(oy / cell)))
    step_x = np.where(dwx > 0.0, 1, -1).astype(np.int64)
    step_y = np.where(dwy > 0.0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta_x = np.where(dwx != 0.0, cell / np.abs(dwx), np.inf)
        t_delta_y = np.where(dwy != 0.0, cell / np.abs(dwy), np.inf)
        nxt_x = np.where(step_x > 0, (ix + 1) * cell, ix * cell)
        nxt_y = np.where(step_y > 0, (iy + 1) * cell, iy * cell)
        t_max_x = np.where(dwx != 0.0, (nxt_x - ox) / dwx, np.inf)
        t_max_y = np.where(dwy != 0.0, (nxt_y - oy) / dwy, np.inf)

    t_wall = np.full(n, np.inf)
    t_in = np.zeros(n)
    active = np.ones(n, dtype=bool)
    limit = np.minimum(t_plane, max_depth)
    # Camera cell is free by precondition; walk at most the grid perimeter.
    for _ in range(2 * (nx + ny) + 4):
        if not active.any():
            break
        a = np.where(active)[0]
        # Advance each active ray into its next cell (x first on exact ties).
        go_x = t_max_x[a] <= t_max_y[a]
        ax = a[go_x]
        ay = a[~go_x]
        t_in[ax] = t_max_x[ax]
        ix[ax] += step_x[ax]
        t_max_x[ax] += t_delta_x[ax]
        t_in[ay] = t_max_y[ay]
        iy[ay] += step_y[ay]
        t_max_y[ay] += t_delta_y[ay]

        out = (ix[a] < 0) | (ix[a] >= nx) | (iy[a] < 0) | (iy[a] >= ny)
        past = t_in[a] > limit[a]
        drop = out | past
        keep = a[~drop]
        active[a[drop]] = False
        if keep.size == 0:
            continue
        hit_cell = occ[iy[keep], ix[keep]] != 0
        w = keep[hit_cell]
        if w.size:
            t0 = t_in[w]
            t1 = np.minimum(t_max_x[w], t_max_y[w])
            z0 = oz + t0 * dwz[w]
            t_hit = np.full(w.size, np.inf)
            inside = (z0 >= 0.0) & (z0 <= wall_height)
            t_hit[inside] = t0[inside]
            above = (~inside) & (z0 > wall_height) & (dwz[w] < 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_top = np.where(dwz[w] != 0.0,
                                 (wall_height - oz) / dwz[w], np.inf)
                t_bot = np.where(dwz[w] != 0.0, (0.0 - oz) / dwz[w], np.inf)
            top_ok = above & (t_top <= t1)
            t_hit[top_ok] = t_top[top_ok]
            below = (~inside) & (z0 < 0.0) & (dwz[w] > 0.0)
            bot_ok = below & (t_bot <= t1)
            t_hit[bot_ok] = t_bot[bot_ok]
            got = np.isfinite(t_hit)
            t_wall[w[got]] = t_hit[got]
            active[w[got]] = False

    t = np.minimum(t_wall, t_plane)
    depth = np.where(np.isfinite(t) & (t >= min_depth) & (t <= max_depth), t, 0.0)
    return depth.reshape(height, width).astype(np.float32)


def voxel_reduce(pts, voxel):
    """Indices of one representative point per occupied voxel.

    The representative is the input point nearest its voxel's point centroid
    (ties -> lowest input index).  Output is ordered by voxel grid index
    (ix, iy, iz) lexicographically.
    """
    n = pts.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    idx3 = np.floor(pts / voxel).astype(np.int64)
    mins = idx3.min(axis=0)
    rel = idx3 - mins
    spans = rel.max(axis=0) + 1
    key = (rel[:, 0] * spans[1] + rel[:, 1]) * spans[2] + rel[:, 2]
    uniq, inv = np.unique(key, return_inverse=True)
    sums = np.zeros((uniq.size, 3), dtype=np.float64)
    np.add.at(sums, inv, pts)
    counts = np.bincount(inv, minlength=uniq.size).astype(np.float64)
    cent = sums / counts[:, None]
    diff = pts - cent[inv]
    d2 = (diff * diff).sum(axis=1)
    order = np.lexsort((np.arange(n), d2, inv))
    grp = inv[order]
    first = np.ones(n, dtype=bool)
    first[1:] = grp[1:] != grp[:-1]
    return order[first].astype(np.int64)


def nearest_neighbors(query, ref, cell):
    """Exact nearest reference point per query (index, squared distance).

    ``cell`` sizes the spatial hash in the compiled backend; the reference
    implementation is chunked brute force (identical results, lowest-index
    tie-break via argmin).
    """
    del cell
    n = query.shape[0]
    m = ref.shape[0]
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    if n == 0:
        return idx, d2
    chunk = max(1, int(1_000_000 // max(m, 1)))
    for s in range(0, n, chunk):
        q = query[s:s + chunk]
        dx = q[:, None, 0] - ref[None, :, 0]
        dy = q[:, None, 1] - ref[None, :, 1]
        dz = q[:, None, 2] - ref[None, :, 2]
        dist = dx * dx + dy * dy + dz * dz
        best = np.argmin(dist, axis=1)
        idx[s:s + chunk] = best
        d2[s:s + chunk] = dist[np.arange(q.shape[0]), best]
    return idx, d2


def _box_entry(px, py, vx, vy, x0, x1, y0, y1):
    """Earliest strict interior entry of p + t*v into an open box, else inf.

    Vectorized over boxes (px..y1 are arrays of equal shape).
    """
    tmin = np.zeros_like(px)
    tmax = np.ones_like(px)
    ok = np.ones(px.shape, dtype=bool)
    for p0, v, lo, hi in ((px, vx, x0, x1), (py, vy, y0, y1)):
        v = np.asarray(v, dtype=np.float64)
        para = v == 0.0
        ok &= ~para | ((p0 > lo) & (p0 < hi))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo - p0) / v
            tb = (hi - p0) / v
        enter = np.where(para, 0.0, np.minimum(ta, tb))
        exit_ = np.where(para, 1.0, np.maximum(ta, tb))
        tmin = np.maximum(tmin, enter)
        tmax = np.minimum(tmax, exit_)
    ok &= tmin < tmax
    return np.where(ok, tmin, np.inf)


def _circle_entry(px, py, vx, vy, cx, cy, r):
    """Earliest strict interior entry of p + t*v into an open disk, else inf."""
    ox = px - cx
    oy = py - cy
    a = vx * vx + vy * vy
    b = 2.0 * (ox * vx + oy * vy)
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4.0 * a * c
    ok = (disc > 0.0) & (a > 0.0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
    # Interior is occupied for t in (t0, t1); contact at max(t0, 0).
    t = np.maximum(t0, 0.0)
    ok &= (t1 > t) & (t <= 1.0) & (t0 <= 1.0)
    return np.where(ok, t, np.inf)


def sweep_disk(occ, cell, px, py, dx, dy, radius):
    """Sweep a disk from (px,py) by (dx,dy); earliest wall contact.

    Returns ``(t, hit)`` with t in [0,1]: the largest motion fraction before
    the open footprint disk would overlap a wall cell.  Contact semantics are
    strict-interior: grazing at exactly ``radius`` (tangent or parallel slide)
    is not a collision, so an agent resting against a wall can slide along it.
    """
    ny, nxc = occ.shape
    if dx == 0.0 and dy == 0.0:
        return 1.0, False
    pad = radius + 1e-9
    lo_x = min(px, px + dx) - pad
    hi_x = max(px, px + dx) + pad
    lo_y = min(py, py + dy) - pad
    hi_y = max(py, py + dy) + pad
    ix0 = max(0, int(np.floor(lo_x / cell)))
    ix1 = min(nxc - 1, int(np.floor(hi_x / cell)))
    iy0 = max(0, int(np.floor(lo_y / cell)))
    iy1 = min(ny - 1, int(np.floor(hi_y / cell)))
    if ix1 < ix0 or iy1 < iy0:
        return 1.0, False
    sub = occ[iy0:iy1 + 1, ix0:ix1 + 1]
    wy, wx = np.nonzero(sub)
    if wx.size == 0:
        return 1.0, False
    x0 = (wx + ix0) * cell
    x1 = x0 + cell
    y0 = (wy + iy0) * cell
    y1 = y0 + cell

    t_best = np.inf
    # Rounded rectangle = x-expanded box U y-expanded box U corner disks.
    px_a = np.full(wx.shape, px)
    py_a = np.full(wx.shape, py)
    t_best = min(t_best, _box_entry(px_a, py_a, dx, dy,
                                    x0 - radius, x1 + radius, y0, y1).min())
    t_best = min(t_best, _box_entry(px_a, py_a, dx, dy,
                                    x0, x1, y0 - radius, y1 + radius).min())
    for ccx, ccy in ((x0, y0), (x0, y1), (x1, y0), (x1, y1)):
        t_best = min(t_best, _circle_entry(px_a, py_a, dx, dy,
                                           ccx, ccy, radius).min())
    if np.isinf(t_best):
        return 1.0, False
    return float(min(t_best, 1.0)), True
