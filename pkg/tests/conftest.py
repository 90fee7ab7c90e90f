import hypothesis
import numpy as np
import pytest

from svscene.grid import GridConfig, SparseVoxelGrid
from svscene.raster import Camera

hypothesis.settings.register_profile(
    "default", deadline=None, max_examples=40, derandomize=True
)
hypothesis.settings.load_profile("default")


def random_grid(seed=0, n=24, level=3, k=4, n_d=1, w_s=2.0, dens_loc=0.0, dens_std=0.6,
                sh_offset=1.0, l_max=8):
    """Seeded random sparse grid used across the suite."""
    rng = np.random.default_rng(seed)
    cfg = GridConfig([0.0, 0.0, 0.0], w_s, L_max=l_max)
    grid = SparseVoxelGrid(cfg, n_d=n_d, k=k)
    cells = 1 << level
    total = cells ** 3
    n = min(n, total)
    pick = rng.choice(total, size=n, replace=False)
    ijk = np.stack([pick // cells ** 2, (pick // cells) % cells, pick % cells], axis=1)
    s = grid.sh_terms
    v_sh = rng.normal(0.0, 0.3, size=(n, s, 3))
    v_sh[:, 0, :] += sh_offset
    grid.insert(
        np.full(n, level), ijk,
        rng.normal(dens_loc, dens_std, size=(n, 8)),
        v_sh,
        rng.normal(0.0, 0.5, size=(n, k)),
        rng.normal(0.0, 1.0, size=n),
    )
    return grid


def oracle_scene(seed, n=28, level=3, k=3, ramp=0.8, noise=0.15, loc=-1.0):
    """Random scene whose density variation keeps the K=3 segment quadrature
    within the oracle-equivalence tolerance (used for render-vs-marching tests)."""
    rng = np.random.default_rng(seed)
    cfg = GridConfig([0.0, 0.0, 0.0], 2.0, L_max=8)
    grid = SparseVoxelGrid(cfg, n_d=1, k=k)
    cells = 1 << level
    pick = rng.choice(cells ** 3, size=n, replace=False)
    ijk = np.stack([pick // cells ** 2, (pick // cells) % cells, pick % cells], axis=1)
    corner_pos = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.float64)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    v_geo = (corner_pos @ direction)[None, :] * ramp + rng.normal(loc, noise, size=(n, 8))
    v_sh = rng.normal(0.0, 0.3, size=(n, 4, 3))
    v_sh[:, 0, :] += 1.0
    grid.insert(
        np.full(n, level), ijk, v_geo, v_sh,
        rng.normal(0.0, 0.5, size=(n, k)), rng.normal(0.0, 1.0, size=n),
    )
    return grid


def axis_camera(res=16, dist=3.0, focal_scale=1.25):
    """Camera on the -z axis looking at the origin along +z."""
    return Camera(
        fx=res * focal_scale, fy=res * focal_scale, cx=res / 2.0, cy=res / 2.0,
        R=np.eye(3), t=np.array([0.0, 0.0, dist]), width=res, height=res,
    )


def orbit_camera(angle, elev=0.3, radius=3.0, res=16, focal_scale=1.25, target=None):
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    pos = target + radius * np.array(
        [np.sin(angle) * np.cos(elev), np.sin(elev), -np.cos(angle) * np.cos(elev)]
    )
    fwd = target - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    down /= np.linalg.norm(down)
    r = np.stack([right, down, fwd])
    return Camera(
        fx=res * focal_scale, fy=res * focal_scale, cx=res / 2.0, cy=res / 2.0,
        R=r, t=-r @ pos, width=res, height=res,
    )


@pytest.fixture
def small_grid():
    return random_grid()


@pytest.fixture
def small_camera():
    return axis_camera()
