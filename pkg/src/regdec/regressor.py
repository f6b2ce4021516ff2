"""Encoder + fully connected head predicting control-grid displacements
from a volume and its class label.

The encoder runs slice-wise over the z axis (each x-y slice is a
one-channel image) and ends in global average pooling; slice features are
averaged into one vector per volume. The head sees that vector concatenated
with the one-hot class label.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ffd, nnet
from .ffd import ControlGrid
from .nnet import NetStack
from .register import RegistrationOptions, register_pair
from .volume import Volume

log = logging.getLogger(__name__)


class RegressorError(ValueError):
    pass


@dataclass
class RegressorModel:
    encoder: NetStack
    head: NetStack
    classes: tuple
    grid_dims: tuple
    input_dims: tuple
    epochs: int = 0
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def feature_width(self) -> int:
        return self.head.layers[0].n_in - self.class_count

    @property
    def output_width(self) -> int:
        return 3 * int(np.prod(self.grid_dims))


def build_regressor(classes, grid_dims, input_dims, conv_channels=(8, 16), hidden=64, seed=0) -> RegressorModel:
    """conv 3x3 -> relu -> maxpool 2 per stage, global average pool, then affine -> relu -> affine."""
    rng = np.random.default_rng(seed)
    layers = []
    c_in = 1
    for c in conv_channels:
        layers += [nnet.Conv2d(c_in, c, 3, rng), nnet.ReLU(), nnet.MaxPool2d(2)]
        c_in = c
    layers.append(nnet.GlobalAvgPool())
    encoder = NetStack(layers)
    out = 3 * int(np.prod(grid_dims))
    head = NetStack([nnet.Affine(c_in + len(classes), hidden, rng), nnet.ReLU(), nnet.Affine(hidden, out, rng)])
    return RegressorModel(encoder, head, tuple(classes), tuple(int(g) for g in grid_dims),
                          tuple(int(n) for n in input_dims))


def _slices(model: RegressorModel, volumes) -> np.ndarray:
    arrs = []
    for v in volumes:
        if v.dims != model.input_dims:
            raise RegressorError(f"volume dims {v.dims} differ from model input {model.input_dims}")
        arrs.append(np.moveaxis(v.as_float(), 2, 0))  # (nz, nx, ny)
    return np.concatenate(arrs)[:, None, :, :]


def _encode_batch(model, volumes, mode):
    nz = model.input_dims[2]
    maps, cache = model.encoder.forward(_slices(model, volumes), mode)
    return maps.reshape(len(volumes), nz, -1).mean(axis=1), cache


def encode(model: RegressorModel, v: Volume) -> np.ndarray:
    """Pooled encoder feature vector of one volume (eval mode)."""
    return _encode_batch(model, [v], "eval")[0][0]


def encode_many(model: RegressorModel, volumes, batch: int = 16) -> np.ndarray:
    out = [_encode_batch(model, volumes[i:i + batch], "eval")[0] for i in range(0, len(volumes), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.feature_width))


def one_hot(model: RegressorModel, labels) -> np.ndarray:
    out = np.zeros((len(labels), model.class_count))
    for i, lab in enumerate(labels):
        if lab not in model.classes:
            raise RegressorError(f"unknown class label {lab!r}")
        out[i, model.classes.index(lab)] = 1.0
    return out


def _head_input(model, feats, labels):
    return np.concatenate([feats, one_hot(model, labels)], axis=1)


def predict_from_features(model: RegressorModel, feats, labels) -> np.ndarray:
    return model.head.forward(_head_input(model, np.atleast_2d(feats), labels), "eval")[0]


def predict_params(model: RegressorModel, v: Volume, class_label: str) -> ControlGrid:
    out = predict_from_features(model, encode(model, v)[None], [class_label])[0]
    return ControlGrid(model.grid_dims, out.reshape(model.grid_dims + (3,)), model.input_dims)


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainingItem:
    volume: Volume
    label: str
    grid: ControlGrid
    sample_id: str
    transform: str = "id"


AUGMENTATIONS = ("id", "flip_x", "flip_z", "flip_xz")


def augment(v: Volume, name: str) -> Volume:
    """Flips in the en-face (x, z) plane; the band (depth) axis is left alone.

    ``flip_xz`` equals a 180 degree rotation about the depth axis.
    """
    a = v.data
    if name == "id":
        return v
    if name == "flip_x":
        return v.with_data(a[::-1, :, :])
    if name == "flip_z":
        return v.with_data(a[:, :, ::-1])
    if name == "flip_xz":
        return v.with_data(a[::-1, :, ::-1])
    if name == "rot90_xz":
        if a.shape[0] != a.shape[2]:
            raise RegressorError("90 degree en-face rotation needs nx == nz")
        return v.with_data(np.rot90(a, 1, axes=(0, 2)))
    raise RegressorError(f"unknown augmentation {name!r}")


def augmentation_plan(aug_factor: int, seed: int, square: bool = False) -> list:
    """The identity plus ``aug_factor - 1`` seeded transforms, distinct while the pool lasts."""
    if aug_factor < 1:
        raise RegressorError("aug_factor must be >= 1")
    pool = [a for a in AUGMENTATIONS if a != "id"] + (["rot90_xz"] if square else [])
    rng = np.random.default_rng(seed)
    plan = ["id"]
    order = list(rng.permutation(pool))
    while len(plan) < aug_factor:
        if not order:
            order = list(rng.permutation(pool))
        plan.append(str(order.pop(0)))
    return plan


def ground_truth(volume: Volume, atlas_volume: Volume, grid_dims, opts=None, cache_path=None) -> ControlGrid:
    """Registration of ``volume`` to its class atlas, rounded to float32 like the
    on-disk grid format so cached and fresh results are identical."""
    if cache_path is not None and Path(cache_path).exists():
        return ffd.load_grid(cache_path)
    grid, _ = register_pair(volume, atlas_volume, grid_dims, opts)
    grid = ControlGrid(grid.grid_dims, grid.displacements.astype(np.float32).astype(np.float64), grid.target_dims)
    if cache_path is not None:
        ffd.save_grid(grid, cache_path)
    return grid


def make_training_set(samples, atlases: dict, aug_factor: int, grid_dims, reg_opts: RegistrationOptions | None = None,
                      seed: int = 0, sample_ids=None, cache_dir=None) -> list:
    """Augmented (volume, label, ground-truth grid) triples.

    Every augmented copy is registered afresh to the atlas of its own class.
    """
    out = []
    for n, s in enumerate(samples):
        if s.class_label not in atlases:
            raise RegressorError(f"no atlas for class {s.class_label}")
        atlas = atlases[s.class_label]
        atlas_vol = getattr(atlas, "mean_volume", atlas)
        sid = sample_ids[n] if sample_ids is not None else f"s{n}"
        square = s.volume.dims[0] == s.volume.dims[2]
        for t in augmentation_plan(aug_factor, seed + n, square):
            v = augment(s.volume, t)
            cache = None if cache_dir is None else Path(cache_dir) / f"{sid}_{s.class_label}_{t}.grid"
            out.append(TrainingItem(v, s.class_label, ground_truth(v, atlas_vol, grid_dims, reg_opts, cache), sid, t))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainOptions:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 8
    optimizer: str = "adam"
    seed: int = 0


def batch_loss_and_grads(model: RegressorModel, volumes, labels, targets, mode="train"):
    """MSE over grid scalars, with gradients for encoder and head parameters."""
    nz = model.input_dims[2]
    feats, ecache = _encode_batch(model, volumes, mode)
    out, hcache = model.head.forward(_head_input(model, feats, labels), mode)
    loss, dout = nnet.mse_loss(out, targets)
    dinput, hgrads = model.head.backward(hcache, dout)
    dfeat = dinput[:, : feats.shape[1]]
    dmaps = np.repeat(dfeat / nz, nz, axis=0)
    _, egrads = model.encoder.backward(ecache, dmaps)
    return loss, egrads, hgrads


def _dataset_loss(model, items, batch):
    if not items:
        return float("nan")
    total = 0.0
    for i in range(0, len(items), batch):
        chunk = items[i:i + batch]
        pred = predict_from_features(model, encode_many(model, [it.volume for it in chunk]), [it.label for it in chunk])
        targ = np.stack([it.grid.flat() for it in chunk])
        total += float(np.sum((pred - targ) ** 2))
    return total / (len(items) * model.output_width)


def train_regressor(model: RegressorModel, train_items, val_items=(), opts: TrainOptions | None = None):
    """Mini-batch MSE training; records per-epoch training and validation loss.

    The training loss of an epoch is measured on the whole training set after
    that epoch's updates.
    """
    opts = opts or TrainOptions()
    if not train_items:
        raise RegressorError("empty training set")
    rng = np.random.default_rng(opts.seed)
    params = [p for _, _, p in model.encoder.parameters()] + [p for _, _, p in model.head.parameters()]
    opt = nnet.make_optimizer(opts.optimizer, opts.lr)
    targets = np.stack([it.grid.flat() for it in train_items])
    for epoch in range(opts.epochs):
        order = rng.permutation(len(train_items))
        for start in range(0, len(order), opts.batch_size):
            idx = order[start:start + opts.batch_size]
            loss, eg, hg = batch_loss_and_grads(model, [train_items[i].volume for i in idx],
                                                [train_items[i].label for i in idx], targets[idx])
            if not np.isfinite(loss):
                raise RegressorError(f"non-finite training loss at epoch {epoch + 1}")
            opt.step(params, model.encoder.flat_grads(eg) + model.head.flat_grads(hg))
        model.train_losses.append(_dataset_loss(model, train_items, 32))
        model.val_losses.append(_dataset_loss(model, list(val_items), 32))
        model.epochs += 1
        log.info("regressor epoch %d: train %.4g val %.4g", model.epochs, model.train_losses[-1], model.val_losses[-1])
    return model


# ---------------------------------------------------------------------------
# persistence


def save_regressor(model: RegressorModel, path) -> None:
    names = "\t".join(model.classes).encode()
    n = len(model.train_losses)
    payload = b"".join([
        struct.pack("<3I3II", *model.grid_dims, *model.input_dims, model.epochs),
        struct.pack("<II", len(names), n),
        names,
        np.asarray(model.train_losses, dtype="<f8").tobytes(),
        np.asarray(model.val_losses, dtype="<f8").tobytes(),
    ])
    nnet.write_model(path, [model.encoder, model.head], [(b"REGR", payload)])


def load_regressor(path) -> RegressorModel:
    (encoder, head), sections = nnet.read_model(path)
    if b"REGR" not in sections:
        raise RegressorError(f"{path}: missing REGR section")
    p = sections[b"REGR"]
    g0, g1, g2, n0, n1, n2, epochs = struct.unpack_from("<3I3II", p, 0)
    off = struct.calcsize("<3I3II")
    nlen, n = struct.unpack_from("<II", p, off)
    off += 8
    classes = tuple(p[off:off + nlen].decode().split("\t"))
    off += nlen
    tr = np.frombuffer(p, dtype="<f8", count=n, offset=off).tolist()
    va = np.frombuffer(p, dtype="<f8", count=n, offset=off + 8 * n).tolist()
    return RegressorModel(encoder, head, classes, (g0, g1, g2), (n0, n1, n2), epochs, tr, va)
