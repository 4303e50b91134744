"""numba-compiled twins of the numpy reference kernels.

Each function mirrors the arithmetic of its ``numpy_backend`` counterpart
operation-for-operation so the two backends agree bitwise on the same inputs
(verified in tests/test_kernels.py).  See numpy_backend for the shared
conventions.
"""

from __future__ import annotations

import numpy as np
import numba as nb

BACKEND = "numba"


@nb.njit(cache=True)
def _raycast_impl(occ, cell, wall_height, has_ceiling, ox, oy, oz, rot,
                  fx, fy, cx, cy, width, height, min_depth, max_depth):
    ny, nx = occ.shape
    depth = np.zeros((height, width), dtype=np.float32)
    for v in range(height):
        dcy = (v - cy) / fy
        for u in range(width):
            dcx = (u - cx) / fx
            dwx = rot[0, 0] * dcx + rot[0, 1] * dcy + rot[0, 2]
            dwy = rot[1, 0] * dcx + rot[1, 1] * dcy + rot[1, 2]
            dwz = rot[2, 0] * dcx + rot[2, 1] * dcy + rot[2, 2]

            t_plane = np.inf
            if dwz < 0.0:
                t_plane = (0.0 - oz) / dwz
            elif has_ceiling and dwz > 0.0:
                t_plane = (wall_height - oz) / dwz

            ix = np.int64(np.floor(ox / cell))
            iy = np.int64(np.floor(oy / cell))
            step_x = 1 if dwx > 0.0 else -1
            step_y = 1 if dwy > 0.0 else -1
            if dwx != 0.0:
                t_delta_x = cell / abs(dwx)
                nxt = (ix + 1) * cell if step_x > 0 else ix * cell
                t_max_x = (nxt - ox) / dwx
            else:
                t_delta_x = np.inf
                t_max_x = np.inf
            if dwy != 0.0:
                t_delta_y = cell / abs(dwy)
                nxt = (iy + 1) * cell if step_y > 0 else iy * cell
                t_max_y = (nxt - oy) / dwy
            else:
                t_delta_y = np.inf
                t_max_y = np.inf

            limit = t_plane if t_plane < max_depth else max_depth
            t_wall = np.inf
            for _ in range(2 * (nx + ny) + 4):
                if t_max_x <= t_max_y:
                    t_in = t_max_x
                    ix += step_x
                    t_max_x += t_delta_x
                else:
                    t_in = t_max_y
                    iy += step_y
                    t_max_y += t_delta_y
                if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                    break
                if t_in > limit:
                    break
                if occ[iy, ix] != 0:
                    t1 = t_max_x if t_max_x < t_max_y else t_max_y
                    z0 = oz + t_in * dwz
                    t_hit = np.inf
                    if 0.0 <= z0 <= wall_height:
                        t_hit = t_in
                    elif z0 > wall_height and dwz < 0.0:
                        t_top = (wall_height - oz) / dwz
                        if t_top <= t1:
                            t_hit = t_top
                    elif z0 < 0.0 and dwz > 0.0:
                        t_bot = (0.0 - oz) / dwz
                        if t_bot <= t1:
                            t_hit = t_bot
                    if np.isfinite(t_hit):
                        t_wall = t_hit
                        break

            t = t_wall if t_wall < t_plane else t_plane
            if np.isfinite(t) and min_depth <= t <= max_depth:
                depth[v, u] = t
    return depth


def raycast_depth(occ, cell, wall_height, has_ceiling, cam_pos, rot,
                  fx, fy, cx, cy, width, height, min_depth, max_depth):
    return _raycast_impl(occ, float(cell), float(wall_height), bool(has_ceiling),
                         float(cam_pos[0]), float(cam_pos[1]), float(cam_pos[2]),
                         np.ascontiguousarray(rot, dtype=np.float64),
                         float(fx), float(fy), float(cx), float(cy),
                         int(width), int(height), float(min_depth), float(max_depth))


@nb.njit(cache=True)
def _voxel_impl(pts, voxel):
    n = pts.shape[0]
    keys = np.empty(n, dtype=np.int64)
    minx = np.int64(np.floor(pts[0, 0] / voxel))
    miny = np.int64(np.floor(pts[0, 1] / voxel))
    minz = np.int64(np.floor(pts[0, 2] / voxel))
    maxx, maxy, maxz = minx, miny, minz
    ixs = np.empty(n, dtype=np.int64)
    iys = np.empty(n, dtype=np.int64)
    izs = np.empty(n, dtype=np.int64)
    for i in range(n):
        ix = np.int64(np.floor(pts[i, 0] / voxel))
        iy = np.int64(np.floor(pts[i, 1] / voxel))
        iz = np.int64(np.floor(pts[i, 2] / voxel))
        ixs[i] = ix
        iys[i] = iy
        izs[i] = iz
        minx = min(minx, ix)
        miny = min(miny, iy)
        minz = min(minz, iz)
        maxx = max(maxx, ix)
        maxy = max(maxy, iy)
        maxz = max(maxz, iz)
    span_y = maxy - miny + 1
    span_z = maxz - minz + 1
    for i in range(n):
        keys[i] = ((ixs[i] - minx) * span_y + (iys[i] - miny)) * span_z + (izs[i] - minz)

    uniq = np.unique(keys)  # sorted == voxel-lexicographic order
    g = uniq.size
    slot = np.empty(n, dtype=np.int64)
    for i in range(n):
        slot[i] = np.searchsorted(uniq, keys[i])
    sums = np.zeros((g, 3), dtype=np.float64)
    counts = np.zeros(g, dtype=np.float64)
    for i in range(n):
        s = slot[i]
        sums[s, 0] += pts[i, 0]
        sums[s, 1] += pts[i, 1]
        sums[s, 2] += pts[i, 2]
        counts[s] += 1.0
    best_d2 = np.full(g, np.inf)
    best_i = np.full(g, -1, dtype=np.int64)
    for i in range(n):
        s = slot[i]
        dx = pts[i, 0] - sums[s, 0] / counts[s]
        dy = pts[i, 1] - sums[s, 1] / counts[s]
        dz = pts[i, 2] - sums[s, 2] / counts[s]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 < best_d2[s] or (d2 == best_d2[s] and i < best_i[s]):
            best_d2[s] = d2
            best_i[s] = i
    return best_i


def voxel_reduce(pts, voxel):
    if pts.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return _voxel_impl(np.ascontiguousarray(pts, dtype=np.float64), float(voxel))


@nb.njit(cache=True)
def _nn_impl(query, ref, cell):
    n = query.shape[0]
    m = ref.shape[0]
    minx = np.int64(np.floor(ref[0, 0] / cell))
    miny = np.int64(np.floor(ref[0, 1] / cell))
    minz = np.int64(np.floor(ref[0, 2] / cell))
    maxx, maxy, maxz = minx, miny, minz
    cells = np.empty((m, 3), dtype=np.int64)
    for i in range(m):
        for a in range(3):
            cells[i, a] = np.int64(np.floor(ref[i, a] / cell))
        minx = min(minx, cells[i, 0])
        miny = min(miny, cells[i, 1])
        minz = min(minz, cells[i, 2])
        maxx = max(maxx, cells[i, 0])
        maxy = max(maxy, cells[i, 1])
        maxz = max(maxz, cells[i, 2])
    span_x = maxx - minx + 1
    span_y = maxy - miny + 1
    span_z = maxz - minz + 1
    keys = np.empty(m, dtype=np.int64)
    for i in range(m):
        keys[i] = ((cells[i, 0] - minx) * span_y + (cells[i, 1] - miny)) * span_z \
            + (cells[i, 2] - minz)
    order = np.argsort(keys)
    skeys = keys[order]

    out_idx = np.empty(n, dtype=np.int64)
    out_d2 = np.empty(n, dtype=np.float64)
    for qi in range(n):
        qx = query[qi, 0]
        qy = query[qi, 1]
        qz = query[qi, 2]
        cqx = np.int64(np.floor(qx / cell)) - minx
        cqy = np.int64(np.floor(qy / cell)) - miny
        cqz = np.int64(np.floor(qz / cell)) - minz
        r_need = max(max(cqx, span_x - 1 - cqx),
                     max(cqy, span_y - 1 - cqy),
                     max(cqz, span_z - 1 - cqz),
                     np.int64(0))
        best = np.inf
        best_i = np.int64(-1)
        for r in range(r_need + 1):
            if r >= 2:
                lo_bound = (r - 1) * cell
                if lo_bound * lo_bound > best:
                    break
            for dx in range(-r, r + 1):
                gx = cqx + dx
                if gx < 0 or gx >= span_x:
                    continue
                edge_x = abs(dx) == r
                for dy in range(-r, r + 1):
                    gy = cqy + dy
                    if gy < 0 or gy >= span_y:
                        continue
                    edge_xy = edge_x or abs(dy) == r
                    for dz in range(-r, r + 1):
                        if not (edge_xy or abs(dz) == r):
                            continue
                        gz = cqz + dz
                        if gz < 0 or gz >= span_z:
                            continue
                        key = (gx * span_y + gy) * span_z + gz
                        lo = np.searchsorted(skeys, key)
                        hi = np.searchsorted(skeys, key + 1)
                        for j in range(lo, hi):
                            oi = order[j]
                            ddx = qx - ref[oi, 0]
                            ddy = qy - ref[oi, 1]
                            ddz = qz - ref[oi, 2]
                            d2 = ddx * ddx + ddy * ddy + ddz * ddz
                            if d2 < best or (d2 == best and oi < best_i):
                                best = d2
                                best_i = oi
        out_idx[qi] = best_i
        out_d2[qi] = best
    return out_idx, out_d2


def nearest_neighbors(query, ref, cell):
    n = query.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    return _nn_impl(np.ascontiguousarray(query, dtype=np.float64),
                    np.ascontiguousarray(ref, dtype=np.float64), float(cell))


@nb.njit(cache=True, inline="always")
def _box_entry_1(px, py, vx, vy, x0, x1, y0, y1):
    tmin = 0.0
    tmax = 1.0
    if vx == 0.0:
        if not (x0 < px < x1):
            return np.inf
    else:
        ta = (x0 - px) / vx
        tb = (x1 - px) / vx
        enter = min(ta, tb)
        exit_ = max(ta, tb)
        tmin = max(tmin, enter)
        tmax = min(tmax, exit_)
    if vy == 0.0:
        if not (y0 < py < y1):
            return np.inf
    else:
        ta = (y0 - py) / vy
        tb = (y1 - py) / vy
        enter = min(ta, tb)
        exit_ = max(ta, tb)
        tmin = max(tmin, enter)
        tmax = min(tmax, exit_)
    if tmin < tmax:
        return tmin
    return np.inf


@nb.njit(cache=True, inline="always")
def _circle_entry_1(px, py, vx, vy, cx, cy, r):
    ox = px - cx
    oy = py - cy
    a = vx * vx + vy * vy
    b = 2.0 * (ox * vx + oy * vy)
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4.0 * a * c
    if disc <= 0.0 or a <= 0.0:
        return np.inf
    sq = np.sqrt(disc)
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = max(t0, 0.0)
    if t1 > t and t <= 1.0:
        return t
    return np.inf


@nb.njit(cache=True)
def _sweep_impl(occ, cell, px, py, dx, dy, radius):
    ny, nxc = occ.shape
    pad = radius + 1e-9
    lo_x = min(px, px + dx) - pad
    hi_x = max(px, px + dx) + pad
    lo_y = min(py, py + dy) - pad
    hi_y = max(py, py + dy) + pad
    ix0 = max(0, np.int64(np.floor(lo_x / cell)))
    ix1 = min(nxc - 1, np.int64(np.floor(hi_x / cell)))
    iy0 = max(0, np.int64(np.floor(lo_y / cell)))
    iy1 = min(ny - 1, np.int64(np.floor(hi_y / cell)))
    t_best = np.inf
    for iy in range(iy0, iy1 + 1):
        for ix in range(ix0, ix1 + 1):
            if occ[iy, ix] == 0:
                continue
            x0 = ix * cell
            x1 = x0 + cell
            y0 = iy * cell
            y1 = y0 + cell
            t = _box_entry_1(px, py, dx, dy, x0 - radius, x1 + radius, y0, y1)
            if t < t_best:
                t_best = t
            t = _box_entry_1(px, py, dx, dy, x0, x1, y0 - radius, y1 + radius)
            if t < t_best:
                t_best = t
            t = _circle_entry_1(px, py, dx, dy, x0, y0, radius)
            if t < t_best:
                t_best = t
            t = _circle_entry_1(px, py, dx, dy, x0, y1, radius)
            if t < t_best:
                t_best = t
            t = _circle_entry_1(px, py, dx, dy, x1, y0, radius)
            if t < t_best:
                t_best = t
            t = _circle_entry_1(px, py, dx, dy, x1, y1, radius)
            if t < t_best:
                t_best = t
    return t_best


def sweep_disk(occ, cell, px, py, dx, dy, radius):
    if dx == 0.0 and dy == 0.0:
        return 1.0, False
    t = _sweep_impl(occ, float(cell), float(px), float(py), float(dx), float(dy),
                    float(radius))
    if np.isinf(t):
        return 1.0, False
    return float(min(t, 1.0)), True
