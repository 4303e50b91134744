"""The numba kernels must agree with the pure-numpy reference exactly."""

import math
import os

import numpy as np
import pytest

from pcnav.kernels import HAS_NUMBA, available_backends, get_backend

pytestmark = pytest.mark.skipif(not HAS_NUMBA,
                                reason="numba backend unavailable")


@pytest.fixture(scope="module")
def backends():
    return get_backend("numpy"), get_backend("numba")


def _random_world(rng, h=40, w=40):
    occ = np.zeros((h, w), bool)
    occ[0] = occ[-1] = True
    occ[:, 0] = occ[:, -1] = True
    blocks = rng.integers(2, 6)
    for _ in range(blocks):
        y = rng.integers(3, h - 8)
        x = rng.integers(3, w - 8)
        occ[y:y + rng.integers(2, 5), x:x + rng.integers(2, 5)] = True
    return occ


class TestRaycastEquivalence:
    def test_bitwise_equal(self, backends, rng):
        np_be, nb_be = backends
        from pcnav.geom import camera_extrinsic, base_in_world, compose
        occ = _random_world(rng)
        free = np.argwhere(~occ)
        for trial in range(8):
            c = free[rng.integers(len(free))]
            x = (c[1] + 0.5) * 0.1
            y = (c[0] + 0.5) * 0.1
            ext = camera_extrinsic(rng.uniform(0.5, 1.5),
                                   rng.uniform(-0.7, 0.0),
                                   rng.uniform(-0.2, 0.2))
            pose = compose(base_in_world(x, y, rng.uniform(-3, 3)), ext)
            args = (occ, 0.1, 2.0, bool(trial % 2), pose.translation,
                    pose.rotation, 32.0, 32.0, 32.0, 32.0, 64, 64, 0.1, 10.0)
            a = np_be.raycast_depth(*args)
            b = nb_be.raycast_depth(*args)
            np.testing.assert_array_equal(a, b, err_msg=f"trial {trial}")


class TestVoxelEquivalence:
    def test_identical_representatives(self, backends, rng):
        np_be, nb_be = backends
        for trial in range(8):
            n = int(rng.integers(1, 5000))
            pts = rng.uniform(-6, 6, (n, 3))
            # add exact duplicates and near-ties to stress the tie-break
            pts = np.concatenate([pts, pts[: n // 4]])
            a = np_be.voxel_reduce(pts, 0.05)
            b = nb_be.voxel_reduce(pts, 0.05)
            np.testing.assert_array_equal(a, b, err_msg=f"trial {trial}")

    def test_empty(self, backends):
        np_be, nb_be = backends
        pts = np.zeros((0, 3))
        np.testing.assert_array_equal(np_be.voxel_reduce(pts, 0.1),
                                      nb_be.voxel_reduce(pts, 0.1))


class TestNearestNeighborEquivalence:
    def test_indices_and_distances(self, backends, rng):
        np_be, nb_be = backends
        for trial in range(6):
            nq = int(rng.integers(10, 800))
            nr = int(rng.integers(10, 800))
            q = rng.uniform(-4, 4, (nq, 3))
            r = rng.uniform(-4, 4, (nr, 3))
            ia, da = np_be.nearest_neighbors(q, r, 0.25)
            ib, db = nb_be.nearest_neighbors(q, r, 0.25)
            np.testing.assert_array_equal(ia, ib, err_msg=f"trial {trial}")
            np.testing.assert_array_equal(da, db, err_msg=f"trial {trial}")

    def test_clustered_queries(self, backends, rng):
        # queries far from all refs exercise the expanding-ring search
        np_be, nb_be = backends
        q = rng.uniform(-1, 1, (50, 3)) + [50.0, 0.0, 0.0]
        r = rng.uniform(-1, 1, (50, 3))
        ia, da = np_be.nearest_neighbors(q, r, 0.25)
        ib, db = nb_be.nearest_neighbors(q, r, 0.25)
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(da, db)


class TestSweepEquivalence:
    def test_random_segments(self, backends, rng):
        np_be, nb_be = backends
        occ = _random_world(rng)
        for trial in range(200):
            px, py = rng.uniform(0.2, 3.8, 2)
            ang = rng.uniform(-math.pi, math.pi)
            step = rng.uniform(0.0, 0.5)
            dx, dy = step * math.cos(ang), step * math.sin(ang)
            r = rng.uniform(0.05, 0.3)
            a = np_be.sweep_disk(occ, 0.1, px, py, dx, dy, r)
            b = nb_be.sweep_disk(occ, 0.1, px, py, dx, dy, r)
            assert a == b, f"trial {trial}: {a} != {b}"


class TestBackendSelection:
    def test_both_listed(self):
        names = available_backends()
        assert "numpy" in names and "numba" in names

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            get_backend("cuda")

    def test_env_flag_honored(self):
        # the active backend was chosen at import time from PCNAV_NUMBA
        from pcnav import kernels
        want = os.environ.get("PCNAV_NUMBA", "1").strip().lower()
        if want in ("0", "false", "no", "off"):
            assert kernels.BACKEND == "numpy"
        else:
            assert kernels.BACKEND == "numba"
