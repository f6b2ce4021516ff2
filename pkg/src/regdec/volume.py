"""Volumes, layer masks, point clouds and synthetic layered phantoms.

Volumes are stored on disk as a pair of files: ``<name>.hdr`` (plain text
header) and ``<name>.raw`` (little-endian payload, x-fastest).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import CLASSES

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """Scalar 3D image indexed ``data[x, y, z]`` with voxel spacing in mm.

    Intensity data is held as float32 and masks as uint8, matching the two
    on-disk dtypes, so a save/load round trip is bit-exact.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be 3D and nonempty, got shape {data.shape}")
        if data.dtype == np.bool_ or data.dtype == np.uint8:
            data = np.array(data, dtype=np.uint8)
        else:
            data = np.array(data, dtype=np.float32)
            if not np.all(np.isfinite(data)):
                raise VolumeError("volume contains non-finite values")
        data.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype_name(self) -> str:
        return "u8" if self.data.dtype == np.uint8 else "f32"

    def as_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass
class LabeledSample:
    volume: Volume
    class_label: str
    layer_masks: list = field(default_factory=list)
    patient_id: int = 0
    visit_index: int = 0
    # ground truth of the synthetic pathology: bump centre (x, z) and radii, in voxels
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.class_label not in CLASSES:
            raise VolumeError(f"unknown class label {self.class_label!r}")
        for m in self.layer_masks:
            if m.dims != self.volume.dims:
                raise VolumeError("layer mask dims differ from volume dims")
            if not np.all((m.data == 0) | (m.data == 1)):
                raise VolumeError("layer masks must be {0,1}-valued")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3), millimetres

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise VolumeError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# file I/O


def _split_path(path) -> tuple:
    p = str(path)
    for ext in (".hdr", ".raw"):
        if p.endswith(ext):
            p = p[: -len(ext)]
    return Path(p + ".hdr"), Path(p + ".raw")


def save_volume(v: Volume, path) -> None:
    hdr, raw = _split_path(path)
    dt = v.dtype_name
    with open(hdr, "w") as fh:
        fh.write("dims = {} {} {}\n".format(*v.dims))
        fh.write("spacing = {!r} {!r} {!r}\n".format(*v.spacing))
        fh.write(f"dtype = {dt}\n")
    payload = np.asarray(v.data, dtype=_DTYPES[dt]).ravel(order="F")
    with open(raw, "wb") as fh:
        fh.write(payload.tobytes())


def _parse_header(hdr: Path) -> dict:
    fields = {}
    with open(hdr) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise VolumeError(f"{hdr}: malformed header line {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            fields[key] = value
    try:
        dims = tuple(int(s) for s in fields["dims"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
        dtype = fields.get("dtype", "f32")
    except KeyError as exc:
        raise VolumeError(f"{hdr}: missing header field {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeError(f"{hdr}: bad dims {dims}")
    if dtype not in _DTYPES:
        raise VolumeError(f"{hdr}: unsupported dtype {dtype!r}")
    return {"dims": dims, "spacing": spacing, "dtype": dtype}


def load_volume(path) -> Volume:
    hdr, raw = _split_path(path)
    if not hdr.exists():
        raise FileNotFoundError(f"missing header {hdr}")
    if not raw.exists():
        raise FileNotFoundError(f"missing payload {raw}")
    h = _parse_header(hdr)
    dt = _DTYPES[h["dtype"]]
    payload = np.frombuffer(raw.read_bytes(), dtype=dt)
    n = int(np.prod(h["dims"]))
    if payload.size != n or raw.stat().st_size != n * dt.itemsize:
        raise VolumeError(
            f"{raw}: payload holds {raw.stat().st_size} bytes, header dims need {n * dt.itemsize}"
        )
    data = payload.reshape(h["dims"], order="F")
    return Volume(data, h["spacing"])


def save_point_cloud(pc: PointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for p in pc.points:
            w.writerow([repr(float(c)) for c in p])


def load_point_cloud(path) -> PointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return PointCloud(np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]))


# ---------------------------------------------------------------------------
# operations


def extract_point_cloud(v: Volume, threshold: float) -> PointCloud:
    """World coordinates (index x spacing) of every voxel with intensity >= threshold."""
    if not np.isfinite(threshold):
        raise VolumeError("threshold must be finite")
    idx = np.argwhere(v.data >= threshold)
    if len(idx) == 0:
        raise VolumeError(f"no voxel reaches threshold {threshold}")
    return PointCloud(idx * np.asarray(v.spacing))


def downsample(v: Volume, factor: int) -> Volume:
    """Block-mean pooling.

    Axes shorter than ``factor`` are pooled by their own length; trailing
    voxels that do not fill a block are dropped.
    """
    if int(factor) != factor or factor < 1:
        raise VolumeError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return v
    f = [min(factor, n) for n in v.dims]
    out_dims = [n // fi for n, fi in zip(v.dims, f)]
    a = v.as_float()[: out_dims[0] * f[0], : out_dims[1] * f[1], : out_dims[2] * f[2]]
    a = a.reshape(out_dims[0], f[0], out_dims[1], f[1], out_dims[2], f[2]).mean(axis=(1, 3, 5))
    return Volume(a, tuple(s * fi for s, fi in zip(v.spacing, f)))


# ---------------------------------------------------------------------------
# synthetic phantoms

# (top, bottom) of each bright band as fractions of the depth axis, and its intensity
_BANDS = ((0.22, 0.30, 0.85), (0.38, 0.46, 0.6), (0.56, 0.64, 1.0), (0.70, 0.76, 0.7))
_EDGE = 0.9  # voxels, width of the logistic band edge

_CLASS_SHAPE = {
    # amplitude of the layer bump (fraction of depth), fluid pocket depth, broad elevation
    "ClassA": (0.0, 0.0, 0.0),
    "ClassB": (0.06, 0.6, 0.0),
    "ClassC": (0.13, 0.0, 0.05),
}


def _logistic(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def generate_phantom(class_label: str, seed: int, dims=(48, 48, 8), spacing=(1.0, 1.0, 1.0),
                     noise: float = 0.02, patient_id: int = 0, visit_index: int = 0) -> LabeledSample:
    """Layered retina-like volume with a class-dependent elevation of the bands.

    The depth axis is y. The seed fixes the layer jitter, speckle texture and
    the jitter of the pathology position, so phantoms of different classes
    sharing a seed differ only by their deformation.
    """
    if class_label not in CLASSES:
        raise VolumeError(f"unknown class label {class_label!r}")
    nx, ny, nz = (int(d) for d in dims)
    # in-plane axes need room for the bands; the slice axis only needs B-spline support
    if min(nx, ny) < 16 or nz < 4:
        raise VolumeError(f"phantom dims too small: {dims}")
    rng = np.random.default_rng(seed)

    x = np.arange(nx, dtype=np.float64)[:, None, None]
    y = np.arange(ny, dtype=np.float64)[None, :, None]
    z = np.arange(nz, dtype=np.float64)[None, None, :]

    # per-subject anatomy, shared across classes for a given seed
    tilt = rng.uniform(-0.02, 0.02) * ny
    layer_jitter = rng.uniform(-0.01, 0.01, size=len(_BANDS)) * ny
    cx = nx / 2 + rng.uniform(-0.03, 0.03) * nx
    cz = (nz - 1) / 2 + rng.uniform(-0.05, 0.05) * nz
    rx = nx * rng.uniform(0.12, 0.16)
    rz = max(nz * rng.uniform(0.3, 0.4), 1.0)
    severity = rng.uniform(0.85, 1.15)
    texture = ndimage.gaussian_filter(rng.standard_normal((nx, ny, nz)), sigma=(2.0, 1.5, 1.0), mode="wrap")
    texture /= texture.std() + 1e-12
    speckle = rng.standard_normal((nx, ny, nz))

    bump_amp, fluid, lift = _CLASS_SHAPE[class_label]
    bump = np.exp(-0.5 * (((x - cx) / rx) ** 2 + ((z - cz) / rz) ** 2))
    broad = np.exp(-0.5 * (((x - cx) / (2.5 * rx)) ** 2 + ((z - cz) / (2.5 * rz)) ** 2))
    # upward (negative y) displacement of the band surfaces
    elevation = severity * ny * (bump_amp * bump + lift * broad)
    tilt_term = tilt * (x - nx / 2) / nx

    img = np.zeros((nx, ny, nz))
    masks = []
    for i, (top, bot, level) in enumerate(_BANDS):
        # the deeper bands are lifted by the pathology, the inner ones less so
        depth_weight = 0.4 + 0.6 * i / (len(_BANDS) - 1)
        shift = layer_jitter[i] + tilt_term - depth_weight * elevation
        t0 = top * ny + shift
        t1 = bot * ny + shift
        img += level * _logistic((y - t0) / _EDGE) * _logistic((t1 - y) / _EDGE)
        masks.append(Volume(((y >= t0) & (y < t1)).astype(np.uint8), spacing))

    if fluid > 0:
        # dark intraretinal fluid pocket between the second and third bands
        fy = (0.50 * ny + layer_jitter[2] - 0.5 * elevation)
        pocket = np.exp(-0.5 * (((x - cx) / (0.8 * rx)) ** 2 + ((y - fy) / (0.05 * ny)) ** 2
                                + ((z - cz) / rz) ** 2))
        img -= fluid * severity * pocket * (img + 0.3)

    img = img * (1.0 + 0.05 * texture) + 0.02 * texture + noise * speckle
    img = np.clip(img, 0.0, None)
    meta = {"bump_center": (float(cx), float(cz)), "bump_radius": (float(rx), float(rz)),
            "severity": float(severity)}
    return LabeledSample(Volume(img, spacing), class_label, masks, patient_id, visit_index, meta)


def in_bump_region(sample: LabeledSample, x: float, z: float, scale: float = 2.0) -> bool:
    """True when (x, z) lies inside the ``scale``-radius ellipse of the pathology."""
    cx, cz = sample.meta["bump_center"]
    rx, rz = sample.meta["bump_radius"]
    return ((x - cx) / (scale * rx)) ** 2 + ((z - cz) / (scale * rz)) ** 2 <= 1.0


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
