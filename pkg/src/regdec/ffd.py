"""Cubic B-spline free-form deformation on a uniform control grid.

Node ``k`` along an axis of ``n`` voxels with ``g`` nodes sits at voxel
coordinate ``(k - 1) * h`` with ``h = n / (g - 3)``: one padding node before
the first voxel and two past the last, so every voxel has a full 4-node
support per axis. Displacements are in voxel units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .volume import Volume


class GridError(ValueError):
    pass


@dataclass
class ControlGrid:
    grid_dims: tuple
    displacements: np.ndarray  # (gx, gy, gz, 3)
    target_dims: tuple

    def __post_init__(self):
        self.grid_dims = tuple(int(g) for g in self.grid_dims)
        self.target_dims = tuple(int(n) for n in self.target_dims)
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 4:
            raise GridError(f"grid needs at least 4 nodes per axis, got {self.grid_dims}")
        if len(self.target_dims) != 3 or min(self.target_dims) < 1:
            raise GridError(f"bad target dims {self.target_dims}")
        d = np.asarray(self.displacements, dtype=np.float64)
        if d.size != 3 * self.node_count:
            raise GridError(f"expected {3 * self.node_count} displacement values, got {d.size}")
        d = d.reshape(self.grid_dims + (3,))
        if not np.all(np.isfinite(d)):
            raise GridError("non-finite node displacement")
        self.displacements = d

    @classmethod
    def zeros(cls, grid_dims, target_dims) -> "ControlGrid":
        return cls(grid_dims, np.zeros(tuple(grid_dims) + (3,)), target_dims)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def param_count(self) -> int:
        return 3 * self.node_count

    def node_spacing(self) -> tuple:
        return tuple(n / (g - 3) for n, g in zip(self.target_dims, self.grid_dims))

    def node_position(self, i, j, k) -> tuple:
        h = self.node_spacing()
        return tuple((idx - 1) * hh for idx, hh in zip((i, j, k), h))

    def flat(self) -> np.ndarray:
        return self.displacements.ravel()

    def copy(self) -> "ControlGrid":
        return ControlGrid(self.grid_dims, self.displacements.copy(), self.target_dims)


def bspline_weights(u) -> np.ndarray:
    """The four cubic B-spline basis values at local coordinate(s) ``u`` in [0, 1).

    Array input gives shape ``u.shape + (4,)``.
    """
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u >= 0.0) & (u < 1.0)):
        raise GridError(f"local coordinate must lie in [0, 1), got {u if u.ndim == 0 else 'values outside'}")
    return _basis(u)


def _basis(u: np.ndarray) -> np.ndarray:
    u2 = u * u
    u3 = u2 * u
    return np.stack([
        (1.0 - u) ** 3 / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ], axis=-1)


@lru_cache(maxsize=64)
def axis_weights(n: int, g: int) -> np.ndarray:
    """Dense (n, g) matrix mapping node values to voxel values along one axis."""
    h = n / (g - 3)
    t = np.arange(n) / h + 1.0
    cell = np.minimum(np.floor(t).astype(int), g - 3)
    w = _basis(t - cell)
    out = np.zeros((n, g))
    rows = np.arange(n)
    for m in range(4):
        out[rows, cell - 1 + m] = w[:, m]
    out.setflags(write=False)
    return out


def _weights(grid: ControlGrid):
    return [axis_weights(n, g) for n, g in zip(grid.target_dims, grid.grid_dims)]


def field_from_grid(grid: ControlGrid, dims=None) -> np.ndarray:
    """Dense displacement field of shape ``target_dims + (3,)``."""
    if dims is not None and tuple(dims) != grid.target_dims:
        raise GridError(f"grid spans {grid.target_dims}, requested field dims {tuple(dims)}")
    w0, w1, w2 = _weights(grid)
    t = np.tensordot(w0, grid.displacements, axes=(1, 0))  # (n0, g1, g2, 3)
    t = np.tensordot(w1, t, axes=(1, 1))  # (n1, n0, g2, 3)
    t = np.tensordot(w2, t, axes=(1, 2))  # (n2, n1, n0, 3)
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


def field_adjoint(grid: ControlGrid, field_grad: np.ndarray) -> np.ndarray:
    """Transpose of :func:`field_from_grid`: pulls a per-voxel gradient back onto the nodes."""
    w0, w1, w2 = _weights(grid)
    t = np.tensordot(w0.T, field_grad, axes=(1, 0))
    t = np.tensordot(w1.T, t, axes=(1, 1))
    t = np.tensordot(w2.T, t, axes=(1, 2))
    return np.ascontiguousarray(t.transpose(2, 1, 0, 3))


def sample_trilinear(data: np.ndarray, pos: np.ndarray, with_gradient: bool = False):
    """Trilinear interpolation of ``data`` at voxel positions ``pos[..., 3]``.

    Positions are clamped to the volume; the returned spatial gradient is zero
    along any axis where clamping was active.
    """
    data = np.asarray(data, dtype=np.float64)
    dims = data.shape
    idx = []
    frac = []
    inside = []
    for a in range(3):
        n = dims[a]
        p = pos[..., a]
        pc = np.clip(p, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(pc).astype(np.intp), max(n - 2, 0))
        f = pc - i0
        i1 = np.minimum(i0 + 1, n - 1)
        idx.append((i0, i1))
        frac.append(f)
        inside.append((p > 0.0) & (p < n - 1.0))
    flat = data.ravel()
    s1, s2 = dims[1] * dims[2], dims[2]

    def corner(a, b, c):
        return flat[idx[0][a] * s1 + idx[1][b] * s2 + idx[2][c]]

    c000, c100 = corner(0, 0, 0), corner(1, 0, 0)
    c010, c110 = corner(0, 1, 0), corner(1, 1, 0)
    c001, c101 = corner(0, 0, 1), corner(1, 0, 1)
    c011, c111 = corner(0, 1, 1), corner(1, 1, 1)
    fx, fy, fz = frac
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c00 = c000 * gx + c100 * fx
    c10 = c010 * gx + c110 * fx
    c01 = c001 * gx + c101 * fx
    c11 = c011 * gx + c111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    val = c0 * gz + c1 * fz
    if not with_gradient:
        return val
    dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz + ((c101 - c001) * gy + (c111 - c011) * fy) * fz
    dy = (c10 - c00) * gz + (c11 - c01) * fz
    dz = c1 - c0
    grad = np.stack([dx * inside[0], dy * inside[1], dz * inside[2]], axis=-1)
    return val, grad


def identity_positions(dims) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"), axis=-1)


def warp_array(data: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward warp: ``out(x) = data(x + field(x))`` with boundary clamping."""
    if field.shape != tuple(data.shape) + (3,):
        raise GridError(f"field shape {field.shape} does not match volume dims {data.shape}")
    return sample_trilinear(data, identity_positions(data.shape) + field)


def warp_volume(v: Volume, field: np.ndarray) -> Volume:
    return v.with_data(warp_array(v.as_float(), np.asarray(field, dtype=np.float64)))


def warp_mask(mask: Volume, field: np.ndarray) -> Volume:
    """Warp a binary mask and re-binarize at 0.5."""
    return mask.with_data((warp_array(mask.as_float(), field) >= 0.5).astype(np.uint8))


def simulate_field(seed: int, grid_dims, max_disp: float, target_dims) -> ControlGrid:
    """Random grid with every displacement component uniform in [-max_disp, max_disp]."""
    if not max_disp > 0:
        raise GridError(f"max_disp must be positive, got {max_disp}")
    grid_dims = tuple(int(g) for g in grid_dims)
    if len(grid_dims) != 3 or min(grid_dims) < 4:
        raise GridError(f"invalid grid dims {grid_dims}")
    rng = np.random.default_rng(seed)
    d = rng.uniform(-max_disp, max_disp, size=grid_dims + (3,))
    return ControlGrid(grid_dims, d, target_dims)


def displacement_summary(field: np.ndarray) -> dict:
    """Max/mean displacement magnitude and the voxel where the max occurs."""
    mag = np.sqrt(np.sum(field ** 2, axis=-1))
    loc = np.unravel_index(int(np.argmax(mag)), mag.shape)
    return {"max_disp": float(mag.max()), "mean_disp": float(mag.mean()),
            "max_disp_x": int(loc[0]), "max_disp_y": int(loc[1]), "max_disp_z": int(loc[2])}


# ---------------------------------------------------------------------------
# .grid files

_GRID_MAGIC = b"RGRD"
_GRID_VERSION = 1


def save_grid(grid: ControlGrid, path) -> None:
    nodes = grid.displacements.transpose(2, 1, 0, 3).astype("<f4")  # x-fastest node order
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<I3I3I", _GRID_VERSION, *grid.grid_dims, *grid.target_dims))
        fh.write(nodes.tobytes())


def load_grid(path) -> ControlGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _GRID_MAGIC:
        raise GridError(f"{path}: not a grid file")
    version, g0, g1, g2, n0, n1, n2 = struct.unpack_from("<I3I3I", blob, 4)
    if version != _GRID_VERSION:
        raise GridError(f"{path}: unsupported grid version {version}")
    payload = np.frombuffer(blob, dtype="<f4", offset=4 + 28)
    if payload.size != 3 * g0 * g1 * g2:
        raise GridError(f"{path}: truncated displacement payload")
    d = payload.reshape(g2, g1, g0, 3).transpose(2, 1, 0, 3).astype(np.float64)
    return ControlGrid((g0, g1, g2), d, (n0, n1, n2))
