"""Classical registration: MSE similarity, B-spline pairwise registration,
ICP rigid alignment and groupwise atlas construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from . import ffd
from .ffd import ControlGrid
from .volume import PointCloud, Volume

log = logging.getLogger(__name__)


class RegistrationError(ValueError):
    pass


@lru_cache(maxsize=16)
def _identity(dims):
    pos = ffd.identity_positions(dims)
    pos.setflags(write=False)
    return pos


def _check_dims(moving: Volume, fixed: Volume):
    if moving.dims != fixed.dims:
        raise RegistrationError(f"dims differ: moving {moving.dims}, fixed {fixed.dims}")


# ---------------------------------------------------------------------------
# similarity


def _mse(moving: np.ndarray, fixed: np.ndarray, grid: ControlGrid, with_gradient=True):
    f = ffd.field_from_grid(grid)
    pos = _identity(moving.shape) + f
    if not with_gradient:
        r = ffd.sample_trilinear(moving, pos) - fixed
        return float(np.mean(r * r)), None
    val, sgrad = ffd.sample_trilinear(moving, pos, with_gradient=True)
    r = val - fixed
    loss = float(np.mean(r * r))
    dfield = (2.0 / r.size) * r[..., None] * sgrad
    grad = ffd.field_adjoint(grid, dfield)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise RegistrationError("non-finite similarity or gradient")
    return loss, grad


def mse_and_gradient(moving: Volume, fixed: Volume, grid: ControlGrid):
    """Mean squared intensity difference after warping ``moving`` by ``grid``.

    Returns the loss and its exact derivative with respect to every node
    displacement, shape ``grid_dims + (3,)``.
    """
    _check_dims(moving, fixed)
    if grid.target_dims != moving.dims:
        raise RegistrationError(f"grid spans {grid.target_dims}, volumes are {moving.dims}")
    return _mse(moving.as_float(), fixed.as_float(), grid)


# ---------------------------------------------------------------------------
# pairwise B-spline registration


@dataclass
class RegistrationOptions:
    max_iters: int = 300
    tol: float = 1e-5  # relative loss decrease below which iteration stops
    initial_step: float = 1.0  # voxels, largest node move of the first trial step
    armijo_c: float = 1e-4
    min_step: float = 1e-4


def register_arrays(moving: np.ndarray, fixed: np.ndarray, grid_dims, opts: RegistrationOptions | None = None):
    """Steepest descent with Armijo backtracking from the zero grid.

    The search direction is the negative gradient scaled so its largest node
    component is one voxel. The first trial step is ``initial_step``; later
    searches start from twice the previously accepted step (capped at
    ``initial_step``) and halve until the Armijo condition holds.
    """
    opts = opts or RegistrationOptions()
    grid = ControlGrid.zeros(grid_dims, moving.shape)
    loss, grad = _mse(moving, fixed, grid)
    trace = [loss]
    last_step = opts.initial_step
    for _ in range(opts.max_iters):
        gmax = float(np.abs(grad).max())
        if loss == 0.0 or gmax == 0.0:
            break
        direction = -grad / gmax
        slope = float(np.sum(grad * direction))
        step = min(opts.initial_step, 2.0 * last_step)
        accepted = None
        while step >= opts.min_step:
            trial = ControlGrid(grid.grid_dims, grid.displacements + step * direction, grid.target_dims)
            trial_loss, _ = _mse(moving, fixed, trial, with_gradient=False)
            if not np.isfinite(trial_loss):
                raise RegistrationError("non-finite loss during line search")
            if trial_loss <= loss + opts.armijo_c * step * slope:
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            break
        rel = (loss - trial_loss) / loss
        last_step = step
        grid = accepted
        loss, grad = _mse(moving, fixed, grid)
        trace.append(loss)
        if rel < opts.tol:
            break
    return grid, trace


def register_pair(moving: Volume, fixed: Volume, grid_dims, opts: RegistrationOptions | None = None):
    """Register ``moving`` onto ``fixed``; returns the control grid and the loss trace."""
    _check_dims(moving, fixed)
    return register_arrays(moving.as_float(), fixed.as_float(), grid_dims, opts)


# ---------------------------------------------------------------------------
# rigid alignment


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not (np.allclose(r.T @ r, np.eye(3), atol=1e-8) and np.linalg.det(r) > 0):
            raise ValueError("rotation must be orthonormal with determinant +1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_identity(self, atol=1e-9) -> bool:
        return bool(np.allclose(self.rotation, np.eye(3), atol=atol, rtol=0)
                    and np.allclose(self.translation, 0.0, atol=atol, rtol=0))


@dataclass
class IcpOptions:
    max_iters: int = 100
    tol: float = 1e-10  # change of correspondence RMS, mm


def fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (Kabsch)."""
    ca, cb = src.mean(axis=0), dst.mean(axis=0)
    h = (src - ca).T @ (dst - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cb - r @ ca)


def _check_spread(points: np.ndarray, name: str):
    if len(points) < 3:
        raise RegistrationError(f"{name} cloud needs at least 3 points")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-9 * s[0]:
        raise RegistrationError(f"{name} cloud is degenerate (collinear), rotation is rank deficient")


def icp_align(moving: PointCloud, fixed: PointCloud, opts: IcpOptions | None = None) -> RigidTransform:
    """Rigid transform taking ``moving`` onto ``fixed`` by iterated closest points."""
    opts = opts or IcpOptions()
    src, dst = moving.points, fixed.points
    if len(src) == 0 or len(dst) == 0:
        raise RegistrationError("empty point cloud")
    _check_spread(src, "moving")
    _check_spread(dst, "fixed")
    tree = cKDTree(dst)
    transform = RigidTransform(np.eye(3), dst.mean(axis=0) - src.mean(axis=0))
    prev = np.inf
    for _ in range(opts.max_iters):
        dist, idx = tree.query(transform.apply(src))
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if abs(prev - rms) < opts.tol:
            break
        prev = rms
        transform = fit_rigid(src, dst[idx])
    return transform


def apply_rigid(v: Volume, transform: RigidTransform) -> Volume:
    """Resample ``v`` so that content at ``p`` moves to ``transform(p)`` (world mm)."""
    if transform.is_identity(atol=0.0):
        return v
    spacing = np.asarray(v.spacing)
    world = _identity(v.dims) * spacing
    inv = transform.inverse()
    src = inv.apply(world.reshape(-1, 3)).reshape(world.shape) / spacing
    return v.with_data(ffd.sample_trilinear(v.as_float(), src))


# ---------------------------------------------------------------------------
# groupwise atlas


@dataclass
class AtlasOptions:
    rounds: int = 5
    tol: float = 1e-4
    registration: RegistrationOptions = field(default_factory=lambda: RegistrationOptions(max_iters=100))
    # subtract the group-mean grid so the mean frame does not drift between rounds
    center: bool = True


@dataclass
class Atlas:
    mean_volume: Volume
    class_label: str
    iterations_used: int
    final_mean_change: float
    grid_dims: tuple = ()
    tol: float = 0.0


def _order_free_mean(stack: np.ndarray) -> np.ndarray:
    # sorting along the sample axis makes the sum independent of input order
    return np.sort(stack, axis=0).mean(axis=0)


def build_atlas(samples, grid_dims, opts: AtlasOptions | None = None, class_label: str = "") -> Atlas:
    """Iterative groupwise mean: register every volume to the current mean,
    then average the warped volumes, starting from the voxel-wise mean.

    With ``opts.center`` the average grid over the group is removed from every
    grid before warping, which keeps the mean shape from sliding round after round.
    """
    opts = opts or AtlasOptions()
    if len(samples) < 2:
        raise RegistrationError("atlas construction needs at least 2 volumes")
    dims = samples[0].dims
    if any(s.dims != dims for s in samples):
        raise RegistrationError("atlas inputs must share dims")
    arrays = [s.as_float() for s in samples]
    mean = Volume(_order_free_mean(np.stack(arrays)), samples[0].spacing).as_float()
    change = np.inf
    rounds = 0
    for rounds in range(1, opts.rounds + 1):
        grids = [register_arrays(a, mean, grid_dims, opts.registration)[0] for a in arrays]
        if opts.center:
            offset = _order_free_mean(np.stack([g.displacements for g in grids]))
            grids = [ffd.ControlGrid(g.grid_dims, g.displacements - offset, g.target_dims) for g in grids]
        warped = [ffd.warp_array(a, ffd.field_from_grid(g)) for a, g in zip(arrays, grids)]
        # round through float32 so the stored atlas is exactly what later stages see
        new = Volume(_order_free_mean(np.stack(warped)), samples[0].spacing).as_float()
        change = float(np.mean(np.abs(new - mean)))
        mean = new
        log.debug("atlas %s round %d: mean change %.3g", class_label, rounds, change)
        if change < opts.tol:
            break
    return Atlas(Volume(mean, samples[0].spacing), class_label, rounds, change,
                 tuple(int(g) for g in grid_dims), opts.tol)


def save_atlas(atlas: Atlas, path) -> None:
    from .volume import save_volume

    save_volume(atlas.mean_volume, path)
    with open(str(path) + ".txt", "w") as fh:
        fh.write(f"class = {atlas.class_label}\n")
        fh.write(f"rounds = {atlas.iterations_used}\n")
        fh.write(f"tol = {atlas.tol!r}\n")
        fh.write("grid_dims = {} {} {}\n".format(*atlas.grid_dims))
        fh.write(f"final_mean_change = {atlas.final_mean_change!r}\n")
        fh.write(f"converged = {int(atlas.final_mean_change < atlas.tol)}\n")


def load_atlas(path) -> Atlas:
    from .volume import load_volume

    meta = {}
    with open(str(path) + ".txt") as fh:
        for line in fh:
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                meta[k] = v
    return Atlas(load_volume(path), meta["class"], int(meta["rounds"]), float(meta["final_mean_change"]),
                 tuple(int(g) for g in meta["grid_dims"].split()), float(meta["tol"]))
