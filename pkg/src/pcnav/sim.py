"""2.5D indoor simulator: occupancy worlds, raycast depth, agent kinematics.

Worlds are occupancy grids of square cells; walls are full-height extrusions
of their cells, the floor is z=0, the optional ceiling is z=wall_height.
Grid cell (ix, iy) covers [ix*cell, (ix+1)*cell) x [iy*cell, (iy+1)*cell) in
world meters, indexed grid[iy, ix].  Map files put their first text row at
the TOP of the map (highest y), so files read like a floor plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from . import kernels
from .geom import CameraModel, ContractViolationError, DepthImage, Pose

FORWARD, TURN_LEFT, TURN_RIGHT, STOP = 0, 1, 2, 3
ACTION_NAMES = ("Forward", "TurnLeft", "TurnRight", "Stop")
NUM_ACTIONS = 4

FORWARD_STEP = 0.25
TURN_ANGLE = math.radians(10.0)

_SNAP_MAX_CELLS = 2


class InfeasibleWorldError(RuntimeError):
    """Episode sampling exhausted its rejection budget."""


class UnreachableError(RuntimeError):
    """Geodesic endpoint cannot be snapped into traversable space."""


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, math.tau)
    if a <= -math.pi:
        a += math.tau
    return a


class FloorplanWorld:
    """Occupancy-grid world with lazy geometry caches.

    Heavy derived data (wall distance field, per-clearance traversability
    graphs, per-goal Dijkstra fields) is computed on first use and cached on
    the instance; instances are single-threaded owners of their caches.
    """

    def __init__(self, grid: np.ndarray, cell_size: float, wall_height: float,
                 has_ceiling: bool = False, name: str = "world"):
        grid = np.asarray(grid, dtype=bool)
        if grid.ndim != 2 or min(grid.shape) < 3:
            raise ContractViolationError("grid must be 2-D and at least 3x3")
        if cell_size <= 0 or wall_height <= 0:
            raise ContractViolationError("cell_size and wall_height must be positive")
        border = np.concatenate([grid[0], grid[-1], grid[:, 0], grid[:, -1]])
        if not border.all():
            raise ContractViolationError("boundary cells must all be walls")
        self.grid = grid
        self.cell_size = float(cell_size)
        self.wall_height = float(wall_height)
        self.has_ceiling = bool(has_ceiling)
        self.name = name
        self.occ_u8 = np.ascontiguousarray(grid, dtype=np.uint8)
        self._wall_dist: np.ndarray | None = None
        self._graphs: dict = {}
        self._fields: dict = {}

    # -- basic geometry -------------------------------------------------

    @property
    def shape(self):
        return self.grid.shape

    @property
    def extent(self):
        """(width_m, height_m) of the grid."""
        ny, nx = self.grid.shape
        return nx * self.cell_size, ny * self.cell_size

    def cell_of(self, x: float, y: float):
        return (int(math.floor(x / self.cell_size)),
                int(math.floor(y / self.cell_size)))

    def cell_center(self, ix: int, iy: int):
        return ((ix + 0.5) * self.cell_size, (iy + 0.5) * self.cell_size)

    def in_bounds(self, ix: int, iy: int) -> bool:
        ny, nx = self.grid.shape
        return 0 <= ix < nx and 0 <= iy < ny

    def is_free(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return self.in_bounds(ix, iy) and not self.grid[iy, ix]

    def clearance_at(self, x: float, y: float) -> float:
        """Exact distance from a point to the nearest wall rectangle."""
        ny, nx = self.grid.shape
        cs = self.cell_size
        # Only wall cells within the current best bound can matter; start
        # from a box that certainly contains the nearest wall (grids are
        # wall-bounded, so some wall is within max(extent)).
        best = np.inf
        r = 2
        while True:
            ix, iy = self.cell_of(x, y)
            x0 = max(0, ix - r)
            x1 = min(nx - 1, ix + r)
            y0 = max(0, iy - r)
            y1 = min(ny - 1, iy + r)
            sub = self.grid[y0:y1 + 1, x0:x1 + 1]
            wy, wx = np.nonzero(sub)
            if wx.size:
                rcx = (wx + x0 + 0.5) * cs
                rcy = (wy + y0 + 0.5) * cs
                dx = np.maximum(np.abs(x - rcx) - 0.5 * cs, 0.0)
                dy = np.maximum(np.abs(y - rcy) - 0.5 * cs, 0.0)
                best = float(np.sqrt(dx * dx + dy * dy).min())
                # Walls outside the box are farther than (r-1) cells away.
                if best <= (r - 1) * cs:
                    return best
            if x0 == 0 and y0 == 0 and x1 == nx - 1 and y1 == ny - 1:
                return best
            r *= 2

    def wall_distance_field(self) -> np.ndarray:
        """Distance from every cell center to the nearest wall rectangle."""
        if self._wall_dist is None:
            ny, nx = self.grid.shape
            cs = self.cell_size
            cyy, cxx = np.meshgrid((np.arange(ny) + 0.5) * cs,
                                   (np.arange(nx) + 0.5) * cs, indexing="ij")
            centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)
            wy, wx = np.nonzero(self.grid)
            rx = (wx + 0.5) * cs
            ry = (wy + 0.5) * cs
            best = np.full(centers.shape[0], np.inf)
            for s in range(0, rx.size, 512):
                bx = rx[s:s + 512]
                by = ry[s:s + 512]
                dx = np.maximum(np.abs(centers[:, :1] - bx[None, :]) - 0.5 * cs, 0.0)
                dy = np.maximum(np.abs(centers[:, 1:] - by[None, :]) - 0.5 * cs, 0.0)
                d = np.sqrt(dx * dx + dy * dy).min(axis=1)
                best = np.minimum(best, d)
            self._wall_dist = best.reshape(ny, nx)
        return self._wall_dist

    # -- traversability graph and geodesic fields ------------------------

    def traversable(self, clearance: float) -> np.ndarray:
        return (~self.grid) & (self.wall_distance_field() >= clearance)

    def _graph(self, clearance: float):
        key = round(float(clearance), 9)
        if key not in self._graphs:
            trav = self.traversable(clearance)
            ny, nx = trav.shape
            node_id = np.full((ny, nx), -1, dtype=np.int64)
            ys, xs = np.nonzero(trav)
            node_id[ys, xs] = np.arange(ys.size)
            cs = self.cell_size
            rows, cols, costs = [], [], []
            axial = ((1, 0, cs), (0, 1, cs))
            for dx, dy, w in axial:
                a = trav[:ny - dy if dy else ny, :nx - dx if dx else nx]
                b = trav[dy:, dx:]
                ok = a & b
                ay, ax = np.nonzero(ok)
                rows.append(node_id[ay, ax])
                cols.append(node_id[ay + dy, ax + dx])
                costs.append(np.full(ay.size, w))
            diag = cs * math.sqrt(2.0)
            for dx, dy in ((1, 1), (1, -1)):
                y0 = max(0, -dy)
                src = trav[y0:ny - max(0, dy), :nx - 1]
                dst = trav[y0 + dy:ny - max(0, dy) + dy, 1:]
                side_a = trav[y0:ny - max(0, dy), 1:]          # axial x neighbor
                side_b = trav[y0 + dy:ny - max(0, dy) + dy, :nx - 1]  # axial y neighbor
                ok = src & dst & side_a & side_b  # no corner cutting
                ay, ax = np.nonzero(ok)
                rows.append(node_id[ay + y0, ax])
                cols.append(node_id[ay + y0 + dy, ax + 1])
                costs.append(np.full(ay.size, diag))
            r = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
            c = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
            w = np.concatenate(costs) if costs else np.empty(0)
            n = ys.size
            graph = csr_matrix((np.concatenate([w, w]),
                                (np.concatenate([r, c]), np.concatenate([c, r]))),
                               shape=(n, n))
            self._graphs[key] = (graph, node_id, np.stack([xs, ys], axis=1))
        return self._graphs[key]

    def goal_field(self, goal_cell, clearance: float):
        """(distance grid, predecessor-cell grids) for paths toward a goal cell.

        distance[iy, ix] is the geodesic path length (meters) from cell
        (ix, iy) to the goal over the clearance-inflated 8-connected graph;
        predecessors give, for each cell, the next cell on the path toward
        the goal (or -1).  Cached per (goal cell, clearance).
        """
        key = (int(goal_cell[0]), int(goal_cell[1]), round(float(clearance), 9))
        if key not in self._fields:
            graph, node_id, cells = self._graph(clearance)
            gid = node_id[goal_cell[1], goal_cell[0]]
            if gid < 0:
                raise UnreachableError("goal cell is not traversable")
            dist, pred = _csgraph_dijkstra(graph, indices=gid,
                                           return_predecessors=True)
            ny, nx = self.grid.shape
            dgrid = np.full((ny, nx), np.inf)
            nxt_x = np.full((ny, nx), -1, dtype=np.int32)
            nxt_y = np.full((ny, nx), -1, dtype=np.int32)
            trav_mask = node_id >= 0
            ids = node_id[trav_mask]
            cys, cxs = np.nonzero(trav_mask)
            dgrid[trav_mask] = dist[ids]
            # pred[j] is the neighbor of j on the shortest path to the goal.
            p = pred[ids]
            has = p >= 0
            nxt_x[cys[has], cxs[has]] = cells[p[has], 0]
            nxt_y[cys[has], cxs[has]] = cells[p[has], 1]
            if len(self._fields) > 128:
                self._fields.clear()
            self._fields[key] = (dgrid, nxt_x, nxt_y)
        return self._fields[key]

    def snap_cell(self, x: float, y: float, clearance: float):
        """Nearest traversable cell within the snapping budget, else raise."""
        trav = self.traversable(clearance)
        ix, iy = self.cell_of(x, y)
        ny, nx = trav.shape
        best = None
        best_d = np.inf
        for dy in range(-_SNAP_MAX_CELLS, _SNAP_MAX_CELLS + 1):
            for dx in range(-_SNAP_MAX_CELLS, _SNAP_MAX_CELLS + 1):
                jx, jy = ix + dx, iy + dy
                if 0 <= jx < nx and 0 <= jy < ny and trav[jy, jx]:
                    cx, cy = self.cell_center(jx, jy)
                    d = (cx - x) ** 2 + (cy - y) ** 2
                    if d < best_d - 1e-15:
                        best_d = d
                        best = (jx, jy)
        if best is None:
            raise UnreachableError(
                f"no traversable cell within {_SNAP_MAX_CELLS} cells of ({x:.3f}, {y:.3f})")
        return best


# -- map file format ------------------------------------------------------

def parse_map(text: str, name: str = "world") -> FloorplanWorld:
    """Parse the ASCII map format (see module docstring for orientation)."""
    cell_size = None
    wall_height = None
    ceiling = False
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        head = line.split()
        if head[0] == "cellsize":
            cell_size = float(head[1])
        elif head[0] == "height":
            wall_height = float(head[1])
        elif head[0] == "ceiling":
            ceiling = bool(int(head[1]))
        else:
            bad = set(line.strip()) - {"#", "."}
            if bad:
                raise ValueError(f"map line {lineno}: invalid characters {sorted(bad)}")
            rows.append((lineno, [c == "#" for c in line.strip()]))
    if cell_size is None or wall_height is None:
        raise ValueError("map file must declare cellsize and height")
    if not rows:
        raise ValueError("map file has no grid rows")
    width = len(rows[0][1])
    for lineno, row in rows:
        if len(row) != width:
            raise ValueError(
                f"map line {lineno}: row has {len(row)} cells, expected {width}")
    rows = [row for _, row in rows]
    grid = np.array(rows[::-1], dtype=bool)  # first file row = top = max y
    return FloorplanWorld(grid, cell_size, wall_height, ceiling, name=name)


def load_world(path) -> FloorplanWorld:
    import os

    with open(path, "r", encoding="ascii") as f:
        text = f.read()
    return parse_map(text, name=os.path.splitext(os.path.basename(path))[0])


def load_worlds(directory) -> list:
    import glob
    import os

    paths = sorted(glob.glob(os.path.join(str(directory), "*.map")))
    if not paths:
        raise FileNotFoundError(f"no .map files under {directory}")
    return [load_world(p) for p in paths]


# -- agent ---------------------------------------------------------------

@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    footprint_radius: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class MotionNoiseModel:
    trans_sigma: float = 0.02
    rot_sigma: float = math.radians(2.0)
    enabled: bool = False

    def __post_init__(self):
        if self.trans_sigma < 0 or self.rot_sigma < 0:
            raise ContractViolationError("noise sigmas must be >= 0")


def _clipped_normal(rng: np.random.Generator, sigma: float) -> float:
    if sigma == 0.0:
        return 0.0
    return float(np.clip(rng.normal(0.0, sigma), -3.0 * sigma, 3.0 * sigma))


class StepResult(NamedTuple):
    state: "AgentState"
    collided: bool


def step_agent(state: AgentState, action: int, world: FloorplanWorld,
               noise: MotionNoiseModel | None = None,
               rng: np.random.Generator | None = None) -> StepResult:
    """Apply one discrete action; returns (new_state, collided).

    Motion is swept: the footprint disk travels along the commanded (plus
    noise) translation and stops at the first wall contact.  Stop leaves the
    state unchanged and is never a collision.
    """
    if action == STOP:
        return StepResult(state, False)
    dx = dy = dh = 0.0
    if action == FORWARD:
        dx = FORWARD_STEP * math.cos(state.heading)
        dy = FORWARD_STEP * math.sin(state.heading)
    elif action == TURN_LEFT:
        dh = TURN_ANGLE
    elif action == TURN_RIGHT:
        dh = -TURN_ANGLE
    else:
        raise ContractViolationError(f"unknown action {action}")
    if noise is not None and noise.enabled:
        if rng is None:
            raise ContractViolationError("motion noise needs an rng")
        dx += _clipped_normal(rng, noise.trans_sigma)
        dy += _clipped_normal(rng, noise.trans_sigma)
        dh += _clipped_normal(rng, noise.rot_sigma)
    collided = False
    nx_, ny_ = state.x, state.y
    if dx != 0.0 or dy != 0.0:
        t, hit = kernels.sweep_disk(world.occ_u8, world.cell_size,
                                    state.x, state.y, dx, dy,
                                    state.footprint_radius)
        nx_ = state.x + t * dx
        ny_ = state.y + t * dy
        collided = bool(hit)
    new_state = replace(state, x=nx_, y=ny_,
                        heading=wrap_angle(state.heading + dh))
    return StepResult(new_state, collided)


# -- rendering -----------------------------------------------------------

def render_depth(world: FloorplanWorld, cam_world_pose: Pose,
                 cam: CameraModel) -> DepthImage:
    """Raycast a depth image for a camera posed in the world frame."""
    if cam_world_pose.from_frame != "camera" or cam_world_pose.to_frame != "world":
        raise ContractViolationError("render needs a Pose world<-camera")
    pos = cam_world_pose.translation
    if not world.is_free(pos[0], pos[1]) or not (0.0 < pos[2] < world.wall_height):
        raise ContractViolationError("camera must be inside free space")
    data = kernels.raycast_depth(world.occ_u8, world.cell_size,
                                 world.wall_height, world.has_ceiling,
                                 pos, cam_world_pose.rotation,
                                 cam.fx, cam.fy, cam.cx, cam.cy,
                                 cam.width, cam.height,
                                 cam.min_depth, cam.max_depth)
    return DepthImage(data)


# -- geodesic distance and episodes ---------------------------------------

def geodesic_distance(world: FloorplanWorld, frm, to,
                      clearance: float = 0.25) -> float:
    """Shortest-path length (meters) over the clearance-inflated grid.

    Endpoints snap to their nearest traversable cell centers (within 2
    cells); returns inf when the snapped cells are disconnected.
    """
    a = world.snap_cell(frm[0], frm[1], clearance)
    b = world.snap_cell(to[0], to[1], clearance)
    field, _, _ = world.goal_field(b, clearance)
    return float(field[a[1], a[0]])


class Episode(NamedTuple):
    start: "AgentState"
    goal: tuple  # (x, y) meters, world frame


def sample_episode(world: FloorplanWorld, rng: np.random.Generator,
                   min_geo: float, max_geo: float,
                   footprint_radius: float = 0.25,
                   max_tries: int = 1000) -> Episode:
    """Rejection-sample a start state and goal with geodesic in range."""
    width_m, height_m = world.extent
    clearance = footprint_radius
    trav = world.traversable(clearance)
    for _ in range(max_tries):
        sx = rng.uniform(0.0, width_m)
        sy = rng.uniform(0.0, height_m)
        heading = rng.uniform(-math.pi, math.pi)
        gx = rng.uniform(0.0, width_m)
        gy = rng.uniform(0.0, height_m)
        six, siy = world.cell_of(sx, sy)
        gix, giy = world.cell_of(gx, gy)
        if not (world.in_bounds(six, siy) and trav[siy, six]):
            continue
        if not (world.in_bounds(gix, giy) and trav[giy, gix]):
            continue
        if world.clearance_at(sx, sy) < footprint_radius:
            continue
        # The goal point must be physically occupiable too, or "within
        # success distance of the goal" can degenerate into a sliver no
        # discrete step sequence reaches (goals wedged in wall corners).
        if world.clearance_at(gx, gy) < footprint_radius:
            continue
        geo = geodesic_distance(world, (sx, sy), (gx, gy), clearance)
        if not (min_geo <= geo <= max_geo):
            continue
        state = AgentState(x=sx, y=sy, heading=heading,
                           footprint_radius=footprint_radius)
        return Episode(start=state, goal=(gx, gy))
    raise InfeasibleWorldError(
        f"{world.name}: no episode with geodesic in [{min_geo}, {max_geo}] "
        f"after {max_tries} tries")
