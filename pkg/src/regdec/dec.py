"""Deep embedded clustering.

An autoencoder-initialised encoder maps feature vectors to a latent space
where ``k`` centroids live. Soft assignments follow a Student's t kernel;
training pulls them toward a sharpened target distribution by minimising
KL(P || Q) jointly over the encoder weights and the centroids.

Cluster indices are 0-based in this module.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .nnet import NetStack

log = logging.getLogger(__name__)


class DecError(ValueError):
    pass


@dataclass
class ClusterClassMap:
    classes: tuple  # class names, in severity order (least to most diseased)
    cluster_class: np.ndarray  # (k,) index into ``classes``
    counts: np.ndarray  # (k, n_classes) labelled members per cluster
    purity: np.ndarray  # (k,)
    empty: np.ndarray  # (k,) bool, mapped from the nearest non-empty cluster
    severity_order: np.ndarray | None = None  # (k,) severity rank (1..k) of each cluster

    def class_of(self, cluster: int) -> str:
        return self.classes[int(self.cluster_class[cluster])]

    def band(self, class_name: str) -> list:
        ci = self.classes.index(class_name)
        return [j for j in range(len(self.cluster_class)) if self.cluster_class[j] == ci]


@dataclass
class DecModel:
    encoder: NetStack
    centroids: np.ndarray  # (k, latent)
    alpha: float = 1.0
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None
    cluster_map: ClusterClassMap | None = None

    def __post_init__(self):
        self.centroids = np.array(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise DecError("need at least 2 centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise DecError("non-finite centroid")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def standardize(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.feature_mean is not None:
            x = (x - self.feature_mean) / self.feature_scale
        return x

    def embed(self, features) -> np.ndarray:
        return self.encoder.forward(self.standardize(features), "eval")[0]


# ---------------------------------------------------------------------------
# autoencoder pretraining


@dataclass
class AutoencoderOptions:
    hidden: tuple = (32,)
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    seed: int = 0


def pretrain_autoencoder(features, latent_dim: int, opts: AutoencoderOptions | None = None):
    """Train an MLP autoencoder on reconstruction MSE.

    Returns the encoder half and the per-epoch reconstruction loss.
    """
    opts = opts or AutoencoderOptions()
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise DecError("autoencoder pretraining needs at least 2 samples")
    rng = np.random.default_rng(opts.seed)
    sizes = (d,) + tuple(opts.hidden) + (int(latent_dim),)
    encoder = nnet.mlp(sizes, rng)
    decoder = nnet.mlp(sizes[::-1], rng)
    params = [p for _, _, p in encoder.parameters()] + [p for _, _, p in decoder.parameters()]
    opt = nnet.make_optimizer(opts.optimizer, opts.lr)
    losses = []
    for _ in range(opts.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opts.batch_size):
            xb = x[order[start:start + opts.batch_size]]
            z, ce = encoder.forward(xb, "train")
            rec, cd = decoder.forward(z, "train")
            loss, drec = nnet.mse_loss(rec, xb)
            if not np.isfinite(loss):
                raise DecError("non-finite reconstruction loss")
            dz, gd = decoder.backward(cd, drec)
            _, ge = encoder.backward(ce, dz)
            opt.step(params, encoder.flat_grads(ge) + decoder.flat_grads(gd))
            total += loss * len(xb)
        losses.append(total / n)
    return encoder, losses


# ---------------------------------------------------------------------------
# k-means initialisation


def _sq_dists(z, c):
    diff = z[:, None, :] - c[None, :, :]
    return np.sum(diff * diff, axis=-1)


def _kmeanspp(z, k, rng):
    """Greedy k-means++: each new seed is the best of a few d^2-weighted draws."""
    n = len(z)
    trials = 2 + int(np.log(k))
    centers = [z[rng.integers(n)]]
    d2 = _sq_dists(z, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            return None
        cand = rng.choice(n, size=trials, p=d2 / total)
        cand_d2 = np.minimum(d2[None, :], _sq_dists(z, z[cand]).T)
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(z[cand[best]])
        d2 = cand_d2[best]
    return np.array(centers)


def init_centroids_kmeans(z, k: int, seed: int = 0, max_iter: int = 300):
    """k-means++ seeding followed by Lloyd iterations.

    Returns ``(centroids, labels, sse_trace)``. When the data holds fewer than
    ``k`` distinct points the seeding is retried on jittered data, up to five
    attempts.
    """
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    if n < k:
        raise DecError(f"k-means needs n >= k, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    data = z
    centers = None
    for attempt in range(5):
        centers = _kmeanspp(data, k, rng)
        if centers is not None:
            break
        scale = 1e-6 * max(float(np.abs(z).max()), 1.0)
        log.warning("k-means++ found fewer than %d distinct points, jittering (attempt %d)", k, attempt + 1)
        data = z + rng.normal(scale=scale, size=z.shape)
    if centers is None:
        raise DecError(f"cannot seed {k} distinct centroids after 5 attempts")
    labels = None
    trace = []
    for _ in range(max_iter):
        new_labels = np.argmin(_sq_dists(data, centers), axis=1)
        trace.append(float(np.sum((data - centers[new_labels]) ** 2)))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = data[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, labels, trace


# ---------------------------------------------------------------------------
# soft assignment and KL objective


def soft_assign(z, centroids, alpha: float = 1.0) -> np.ndarray:
    """Student's t similarity of each embedded point to each centroid, row-normalised."""
    if alpha <= 0:
        raise DecError("alpha must be positive")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    c = np.asarray(centroids, dtype=np.float64)
    if z.shape[1] != c.shape[1]:
        raise DecError(f"latent dims differ: points {z.shape[1]}, centroids {c.shape[1]}")
    num = (1.0 + _sq_dists(z, c) / alpha) ** (-(alpha + 1.0) / 2.0)
    return num / num.sum(axis=1, keepdims=True)


def target_distribution(q) -> np.ndarray:
    """Sharpened targets: square the assignments, divide by cluster frequency, renormalise."""
    q = np.asarray(q, dtype=np.float64)
    w = q * q / q.sum(axis=0)
    return w / w.sum(axis=1, keepdims=True)


def kl_loss_and_grads(z, centroids, p, alpha: float = 1.0):
    """KL(P || Q) summed over samples, with gradients for the points and centroids.

    ``p`` is held constant.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    c = np.asarray(centroids, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = soft_assign(z, c, alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    loss = float(terms.sum())
    if not np.isfinite(loss):
        raise DecError("non-finite KL loss")
    diff = z[:, None, :] - c[None, :, :]
    a = 1.0 / (1.0 + np.sum(diff * diff, axis=-1) / alpha)
    w = ((alpha + 1.0) / alpha) * a * (p - q)  # (n, k)
    grad_z = np.einsum("ij,ijd->id", w, diff)
    grad_c = -np.einsum("ij,ijd->jd", w, diff)
    return loss, grad_z, grad_c


# ---------------------------------------------------------------------------
# training


@dataclass
class DecOptions:
    max_epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-2
    optimizer: str = "adam"
    stop_tol: float = 0.001
    update_interval: int = 1  # epochs between target-distribution updates
    seed: int = 0


@dataclass
class DecHistory:
    updates: list = field(default_factory=list)  # one dict per P-update
    stopped_early: bool = False

    @property
    def losses(self):
        return [u["loss"] for u in self.updates]


def _reseed_empty(z, model, labels):
    reseeded = []
    used = set()
    for j in range(model.k):
        if np.any(labels == j):
            continue
        d = np.sqrt(_sq_dists(z, model.centroids)[np.arange(len(z)), labels])
        for i in np.argsort(-d, kind="stable"):
            if int(i) not in used:
                break
        used.add(int(i))
        model.centroids[j] = z[i]
        reseeded.append(j)
        log.warning("cluster %d empty at target update, reseeded to sample %d", j, int(i))
    return reseeded


def train_dec(model: DecModel, features, opts: DecOptions | None = None):
    """Alternate target-distribution updates with gradient steps on encoder and centroids.

    Stops when the fraction of samples whose hard assignment changed since the
    previous target update falls below ``stop_tol``, or after ``max_epochs``.
    """
    opts = opts or DecOptions()
    x = model.standardize(features)
    n = len(x)
    if model.k > n:
        raise DecError(f"k={model.k} exceeds sample count {n}")
    rng = np.random.default_rng(opts.seed)
    params = [p for _, _, p in model.encoder.parameters()] + [model.centroids]
    opt = nnet.make_optimizer(opts.optimizer, opts.lr)
    history = DecHistory()
    prev_labels = None
    p_all = None
    for epoch in range(opts.max_epochs):
        if epoch % opts.update_interval == 0:
            z = model.encoder.forward(x, "eval")[0]
            q = soft_assign(z, model.centroids, model.alpha)
            labels = q.argmax(axis=1)
            delta = None
            if prev_labels is not None:
                delta = float(np.mean(labels != prev_labels))
                if delta < opts.stop_tol:
                    history.stopped_early = True
                    break
            reseeded = _reseed_empty(z, model, labels)
            if reseeded:
                q = soft_assign(z, model.centroids, model.alpha)
                labels = q.argmax(axis=1)
            p_all = target_distribution(q)
            loss = kl_loss_and_grads(z, model.centroids, p_all, model.alpha)[0] / n
            history.updates.append({"epoch": epoch, "loss": loss, "delta": delta, "reseeded": reseeded})
            prev_labels = labels
        order = rng.permutation(n)
        for start in range(0, n, opts.batch_size):
            idx = order[start:start + opts.batch_size]
            z, cache = model.encoder.forward(x[idx], "train")
            _, gz, gc = kl_loss_and_grads(z, model.centroids, p_all[idx], model.alpha)
            _, grads = model.encoder.backward(cache, gz / len(idx))
            opt.step(params, model.encoder.flat_grads(grads) + [gc / len(idx)])
    return model, history


def build_dec(features, k: int, latent_dim: int, ae_opts: AutoencoderOptions | None = None,
              seed: int = 0, standardize: bool = True, alpha: float = 1.0):
    """Pretrain the autoencoder on (standardised) features and seed centroids by k-means."""
    x = np.asarray(features, dtype=np.float64)
    mean = scale = None
    if standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
        x = (x - mean) / scale
    encoder, ae_losses = pretrain_autoencoder(x, latent_dim, ae_opts)
    z = encoder.forward(x, "eval")[0]
    centroids, _, _ = init_centroids_kmeans(z, k, seed)
    return DecModel(encoder, centroids, alpha, mean, scale), ae_losses


# ---------------------------------------------------------------------------
# inference and cluster labelling


def assign_cluster(model: DecModel, feature):
    """Hard cluster (argmax q), the q row, and Euclidean latent distances to every centroid."""
    z = model.embed(feature)[0]
    q = soft_assign(z[None], model.centroids, model.alpha)[0]
    d = np.sqrt(np.sum((model.centroids - z) ** 2, axis=1))
    return int(np.argmax(q)), q, d


def hard_assign(model: DecModel, features) -> np.ndarray:
    return soft_assign(model.embed(features), model.centroids, model.alpha).argmax(axis=1)


def map_clusters_to_classes(model: DecModel, features, labels, classes) -> ClusterClassMap:
    """Map every cluster to the majority class of its members.

    Ties go to the class listed first; empty clusters take the class of the
    nearest non-empty centroid and are flagged.
    """
    classes = tuple(classes)
    labels = np.asarray(labels)
    unknown = set(labels.tolist()) - set(classes)
    if unknown:
        raise DecError(f"labels outside the class list: {sorted(unknown)}")
    assign = hard_assign(model, features)
    k = model.k
    counts = np.zeros((k, len(classes)), dtype=int)
    for a, lab in zip(assign, labels):
        counts[a, classes.index(lab)] += 1
    totals = counts.sum(axis=1)
    empty = totals == 0
    if empty.all():
        raise DecError("every cluster is empty")
    cluster_class = counts.argmax(axis=1)  # argmax picks the first maximum
    purity = np.where(empty, 0.0, counts.max(axis=1) / np.maximum(totals, 1))
    for j in range(k):
        if not empty[j] and np.sum(counts[j] == counts[j].max()) > 1:
            log.info("cluster %d has a majority tie, mapped to %s", j, classes[cluster_class[j]])
    if empty.any():
        full = np.flatnonzero(~empty)
        for j in np.flatnonzero(empty):
            d = np.sum((model.centroids[full] - model.centroids[j]) ** 2, axis=1)
            cluster_class[j] = cluster_class[full[int(np.argmin(d))]]
            log.warning("cluster %d has no labelled members, mapped to %s", j, classes[cluster_class[j]])
    return ClusterClassMap(classes, cluster_class, counts, purity, empty)


# ---------------------------------------------------------------------------
# DECC section of the model container


def pack_dec(model: DecModel) -> bytes:
    k, latent = model.centroids.shape
    d = 0 if model.feature_mean is None else len(model.feature_mean)
    cm = model.cluster_map
    parts = [struct.pack("<IIId", k, latent, d, model.alpha)]
    if d:
        parts += [model.feature_mean.astype("<f8").tobytes(), model.feature_scale.astype("<f8").tobytes()]
    parts.append(model.centroids.astype("<f8").tobytes())
    if cm is None:
        parts.append(struct.pack("<I", 0))
    else:
        names = "\t".join(cm.classes).encode()
        parts.append(struct.pack("<II", len(cm.classes), len(names)))
        parts.append(names)
        parts.append(cm.cluster_class.astype("<i4").tobytes())
        parts.append(cm.counts.astype("<i4").tobytes())
        parts.append(cm.empty.astype("u1").tobytes())
        order = cm.severity_order if cm.severity_order is not None else np.zeros(k)
        parts.append(np.asarray(order).astype("<i4").tobytes())
    return b"".join(parts)


def unpack_dec(payload: bytes, encoder: NetStack) -> DecModel:
    off = 0
    k, latent, d, alpha = struct.unpack_from("<IIId", payload, off)
    off += struct.calcsize("<IIId")

    def take(count, dtype):
        nonlocal off
        dt = np.dtype(dtype)
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).copy()
        off += count * dt.itemsize
        return arr

    mean = scale = None
    if d:
        mean, scale = take(d, "<f8").astype(np.float64), take(d, "<f8").astype(np.float64)
    centroids = take(k * latent, "<f8").reshape(k, latent).astype(np.float64)
    model = DecModel(encoder, centroids, alpha, mean, scale)
    (nc,) = struct.unpack_from("<I", payload, off)
    off += 4
    if nc:
        (nlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        classes = tuple(payload[off:off + nlen].decode().split("\t"))
        off += nlen
        cluster_class = take(k, "<i4").astype(int)
        counts = take(k * nc, "<i4").reshape(k, nc).astype(int)
        empty = take(k, "u1").astype(bool)
        order = take(k, "<i4").astype(int)
        totals = counts.sum(axis=1)
        purity = np.where(empty, 0.0, counts.max(axis=1) / np.maximum(totals, 1))
        model.cluster_map = ClusterClassMap(classes, cluster_class, counts, purity, empty,
                                            order if order.any() else None)
    return model
