"""Command implementations: dataset synthesis, atlases, two-phase training,
prediction, evaluation and the leave-one-class-out experiment.

Everything a command needs is read from the work directory, everything it
produces is written there. Layout::

    dataset/   phantom volumes, layer masks, manifest.csv
    atlas/     one mean volume (+ sidecar) per class, icp.csv
    cache/     ground-truth registrations, keyed by sample and augmentation
    models/    regressor.rnet, dec.rnet, cluster_map.csv, losses.csv
    reports/   severity.csv, metrics.csv, holdout_<class>.csv
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dec, ffd, metrics, nnet, regressor, severity
from .config import RunConfig
from .register import (AtlasOptions, IcpOptions, RegistrationOptions, apply_rigid, build_atlas, icp_align,
                       load_atlas, register_pair, save_atlas)
from .volume import (LabeledSample, Volume, VolumeError, ensure_dir, extract_point_cloud, generate_phantom,
                     in_bump_region, load_volume, save_volume)

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("sample_id", "class", "patient_id", "visit_index", "seed", "split", "bump_x", "bump_z",
                    "bump_rx", "bump_rz", "severity")


class PipelineError(RuntimeError):
    pass


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def write_csv(path, header, rows) -> None:
    ensure_dir(Path(path).parent)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_csv(path) -> list:
    if not Path(path).exists():
        raise PipelineError(f"missing file: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _paths(cfg: RunConfig):
    r = cfg.root
    return {"dataset": r / "dataset", "atlas": r / "atlas", "cache": r / "cache", "models": r / "models",
            "reports": r / "reports"}


# ---------------------------------------------------------------------------
# dataset


def phantom_seed(seed: int, class_index: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, class_index, i]).generate_state(1)[0])


def split_indices(n: int, fractions, seed: int) -> list:
    """Shuffle ``range(n)`` and cut it into train/val/test by rounded fractions."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    out = [""] * n
    for pos, idx in enumerate(order):
        out[idx] = names[pos]
    return out


def cmd_synth(cfg: RunConfig) -> Path:
    d = ensure_dir(_paths(cfg)["dataset"])
    rows = []
    patient = 0
    for ci, name in enumerate(cfg.classes):
        splits = split_indices(cfg.counts[ci], cfg.split, phantom_seed(cfg.seed, ci, 10**6))
        for i in range(cfg.counts[ci]):
            sid = f"{name}_{i:03d}"
            s_seed = phantom_seed(cfg.seed, ci, i)
            s = generate_phantom(name, s_seed, cfg.dims, cfg.spacing, cfg.noise, patient_id=patient)
            save_volume(s.volume, d / f"{sid}.hdr")
            for j, m in enumerate(s.layer_masks):
                save_volume(m, d / f"{sid}_layer{j}.hdr")
            (cx, cz), (rx, rz) = s.meta["bump_center"], s.meta["bump_radius"]
            rows.append((sid, name, patient, 0, s_seed, splits[i], cx, cz, rx, rz, s.meta["severity"]))
            patient += 1
    write_csv(d / "manifest.csv", MANIFEST_COLUMNS, rows)
    log.info("wrote %d phantoms to %s", len(rows), d)
    return d / "manifest.csv"


@dataclass
class Entry:
    sample_id: str
    sample: LabeledSample
    split: str


def load_dataset(cfg: RunConfig, with_masks: bool = False) -> list:
    d = _paths(cfg)["dataset"]
    out = []
    for row in read_csv(d / "manifest.csv"):
        sid = row["sample_id"]
        masks = []
        if with_masks:
            j = 0
            while (d / f"{sid}_layer{j}.hdr").exists():
                masks.append(load_volume(d / f"{sid}_layer{j}.hdr"))
                j += 1
        meta = {"bump_center": (float(row["bump_x"]), float(row["bump_z"])),
                "bump_radius": (float(row["bump_rx"]), float(row["bump_rz"])), "severity": float(row["severity"])}
        s = LabeledSample(load_volume(d / f"{sid}.hdr"), row["class"], masks, int(row["patient_id"]),
                          int(row["visit_index"]), meta)
        out.append(Entry(sid, s, row["split"]))
    return out


# ---------------------------------------------------------------------------
# atlases


def cmd_atlas(cfg: RunConfig) -> list:
    """ICP-align each class's training volumes to the first of them, then build the groupwise mean."""
    p = _paths(cfg)
    entries = load_dataset(cfg)
    out_dir = ensure_dir(p["atlas"])
    written = []
    icp_rows = []
    opts = AtlasOptions(cfg.atlas_rounds, cfg.atlas_tol, RegistrationOptions(max_iters=cfg.atlas_max_iters,
                                                                             tol=cfg.reg_tol))
    for name in cfg.classes:
        members = [e for e in entries if e.sample.class_label == name and e.split == "train"]
        if len(members) < 2:
            raise PipelineError(f"class {name} has {len(members)} training volumes, need at least 2")
        ref = members[0].sample.volume
        ref_pc = extract_point_cloud(ref, cfg.icp_threshold)
        aligned = [ref]
        for e in members[1:]:
            t = icp_align(extract_point_cloud(e.sample.volume, cfg.icp_threshold), ref_pc, IcpOptions())
            aligned.append(apply_rigid(e.sample.volume, t))
            angle = np.degrees(np.arccos(np.clip((np.trace(t.rotation) - 1) / 2, -1, 1)))
            icp_rows.append((name, e.sample_id, angle, *t.translation))
        atlas = build_atlas(aligned, cfg.grid_dims, opts, class_label=name)
        save_atlas(atlas, out_dir / f"{name}.hdr")
        written.append(out_dir / f"{name}.hdr")
        log.info("atlas %s: %d rounds, final change %.3g", name, atlas.iterations_used, atlas.final_mean_change)
    write_csv(out_dir / "icp.csv", ("class", "sample_id", "rotation_deg", "tx", "ty", "tz"), icp_rows)
    return written


def load_atlases(cfg: RunConfig, classes) -> dict:
    d = _paths(cfg)["atlas"]
    out = {}
    for name in classes:
        if not (d / f"{name}.hdr").exists():
            raise PipelineError(f"missing atlas for {name}; run the atlas command first")
        out[name] = load_atlas(d / f"{name}.hdr")
    return out


# ---------------------------------------------------------------------------
# training


def _reg_opts(cfg):
    return RegistrationOptions(max_iters=cfg.reg_max_iters, tol=cfg.reg_tol)


def _items(cfg, entries, atlases, aug):
    return regressor.make_training_set([e.sample for e in entries], atlases, aug, cfg.grid_dims, _reg_opts(cfg),
                                       seed=cfg.seed, sample_ids=[e.sample_id for e in entries],
                                       cache_dir=ensure_dir(_paths(cfg)["cache"]))


def mean_displacement(grid) -> float:
    f = ffd.field_from_grid(grid)
    return float(np.mean(np.sqrt(np.sum(f * f, axis=-1))))


@dataclass
class TrainedModels:
    reg: regressor.RegressorModel
    dec: dec.DecModel
    sev: severity.SeverityModel
    ae_losses: list
    dec_history: dec.DecHistory


def train_models(cfg: RunConfig, entries, classes) -> TrainedModels:
    atlases = load_atlases(cfg, classes)
    train = [e for e in entries if e.split == "train" and e.sample.class_label in classes]
    val = [e for e in entries if e.split == "val" and e.sample.class_label in classes]
    if not train:
        raise PipelineError("no training samples")
    train_items = _items(cfg, train, atlases, cfg.aug_factor)
    val_items = _items(cfg, val, atlases, 1)

    # phase 1: regressor
    reg = regressor.build_regressor(classes, cfg.grid_dims, cfg.dims, cfg.conv_channels, cfg.head_hidden, cfg.seed)
    regressor.train_regressor(reg, train_items, val_items,
                              regressor.TrainOptions(cfg.epochs, cfg.lr, cfg.batch_size, cfg.optimizer, cfg.seed))

    # phase 2: DEC on the (frozen) encoder features of the training set
    feats = regressor.encode_many(reg, [it.volume for it in train_items])
    labels = [it.label for it in train_items]
    ae = dec.AutoencoderOptions(cfg.ae_hidden, cfg.ae_epochs, cfg.ae_lr, 32, cfg.ae_optimizer, cfg.seed)
    model, ae_losses = dec.build_dec(feats, cfg.k, cfg.latent_dim, ae, seed=cfg.seed, alpha=cfg.alpha)
    model, hist = dec.train_dec(model, feats, dec.DecOptions(cfg.dec_max_epochs, cfg.dec_batch_size, cfg.dec_lr,
                                                             cfg.dec_optimizer, cfg.stop_tol, cfg.update_interval,
                                                             cfg.seed))
    model.cluster_map = dec.map_clusters_to_classes(model, feats, labels, classes)
    pred = regressor.predict_from_features(reg, feats, labels)
    mags = [mean_displacement(ffd.ControlGrid(cfg.grid_dims, row.reshape(tuple(cfg.grid_dims) + (3,)), cfg.dims))
            for row in pred]
    sev = severity.order_clusters(model.cluster_map, dec.hard_assign(model, feats), mags)
    return TrainedModels(reg, model, sev, ae_losses, hist)


def save_models(tm: TrainedModels, d: Path) -> None:
    ensure_dir(d)
    regressor.save_regressor(tm.reg, d / "regressor.rnet")
    nnet.write_model(d / "dec.rnet", [tm.dec.encoder], [(b"DECC", dec.pack_dec(tm.dec))])
    cm = tm.dec.cluster_map
    rows = []
    for j in range(tm.dec.k):
        rows.append((j, int(tm.sev.rank_of[j]), cm.class_of(j), int(cm.empty[j]), float(cm.purity[j]),
                     *cm.counts[j].tolist()))
    write_csv(d / "cluster_map.csv", ("cluster", "severity_rank", "class", "empty", "purity",
                                      *[f"n_{c}" for c in cm.classes]), rows)
    loss_rows = [("regressor", i + 1, a, b) for i, (a, b) in enumerate(zip(tm.reg.train_losses, tm.reg.val_losses))]
    loss_rows += [("autoencoder", i + 1, a, "") for i, a in enumerate(tm.ae_losses)]
    loss_rows += [("dec", i + 1, u["loss"], "") for i, u in enumerate(tm.dec_history.updates)]
    write_csv(d / "losses.csv", ("phase", "epoch", "train_loss", "val_loss"), loss_rows)


def load_models(d: Path) -> tuple:
    if not (d / "regressor.rnet").exists() or not (d / "dec.rnet").exists():
        raise PipelineError(f"missing models in {d}; run the train command first")
    reg = regressor.load_regressor(d / "regressor.rnet")
    (enc,), sections = nnet.read_model(d / "dec.rnet")
    model = dec.unpack_dec(sections[b"DECC"], enc)
    cm = model.cluster_map
    if cm is None or cm.severity_order is None:
        raise PipelineError(f"{d / 'dec.rnet'} lacks the cluster map or severity ordering")
    bands = {name: sorted(int(cm.severity_order[j]) for j in cm.band(name)) for name in cm.classes}
    return reg, model, severity.SeverityModel(cm.severity_order, bands)


def cmd_train(cfg: RunConfig) -> Path:
    entries = load_dataset(cfg)
    tm = train_models(cfg, entries, tuple(cfg.classes))
    d = _paths(cfg)["models"]
    save_models(tm, d)
    return d


# ---------------------------------------------------------------------------
# prediction


def predict_one(reg, model, sev, v: Volume, sample_id: str, patient_id=0, visit_index=0) -> severity.SeverityReport:
    """Cluster first, class from the cluster, then the registration to that class's atlas."""
    feat = regressor.encode(reg, v)
    cluster, _, dist = dec.assign_cluster(model, feat)
    rank = int(sev.rank_of[cluster])
    cls = model.cluster_map.class_of(cluster)
    grid = regressor.predict_params(reg, v, cls)
    summary = ffd.displacement_summary(ffd.field_from_grid(grid))
    d_ranked = sev.to_rank_order(dist)
    prob = severity.severity_probability(d_ranked, rank)
    return severity.SeverityReport(sample_id, cluster, rank, prob.p_d, prob.raw, prob.clamped, prob.degenerate,
                                   d_ranked, cls, "dec", summary, patient_id, visit_index)


def report_header(k: int) -> tuple:
    return ("sample_id", "cluster", "severity_rank", "p_d", "clamped", "pred_class",
            *[f"d_{i}" for i in range(1, k + 1)],
            "max_disp", "mean_disp", "max_disp_x", "max_disp_y", "max_disp_z", "degenerate", "class_source")


def report_row(r: severity.SeverityReport) -> tuple:
    s = r.displacement
    # clusters are reported 1-based like the severity ranks
    return (r.sample_id, r.cluster + 1, r.severity_rank, r.p_d, r.clamped, r.predicted_class, *r.distances,
            s["max_disp"], s["mean_disp"], s["max_disp_x"], s["max_disp_y"], s["max_disp_z"], r.degenerate,
            r.class_source)


def cmd_predict(cfg: RunConfig, inputs=None) -> Path:
    """Severity reports for the given volumes, or for the test split when none are given."""
    p = _paths(cfg)
    reg, model, sev = load_models(p["models"])
    if inputs:
        todo = []
        for path in inputs:
            try:
                todo.append((Path(str(path)).name.rsplit(".", 1)[0], load_volume(path), 0, 0))
            except (VolumeError, FileNotFoundError) as e:
                raise PipelineError(f"cannot read input {path}: {e}") from None
    else:
        todo = [(e.sample_id, e.sample.volume, e.sample.patient_id, e.sample.visit_index)
                for e in load_dataset(cfg) if e.split == "test"]
    rows = [report_row(predict_one(reg, model, sev, v, sid, pid, vi)) for sid, v, pid, vi in todo]
    out = p["reports"] / "severity.csv"
    write_csv(out, report_header(model.k), rows)
    return out


# ---------------------------------------------------------------------------
# evaluation


def registration_pairs(cfg: RunConfig, entries) -> list:
    """Per pair: MAD, layer Dice and HD95 before and after recovering a simulated deformation."""
    pool = [e for e in entries if e.split == "test"] or entries
    rows = []
    opts = RegistrationOptions(max_iters=cfg.eval_max_iters, tol=cfg.reg_tol)
    for i in range(cfg.eval_pairs):
        e = pool[i % len(pool)]
        truth = ffd.simulate_field(phantom_seed(cfg.seed, 99, i), cfg.grid_dims, cfg.eval_max_disp, cfg.dims)
        f_true = ffd.field_from_grid(truth)
        moving = e.sample.volume
        fixed = ffd.warp_volume(moving, f_true)
        grid, _ = register_pair(moving, fixed, cfg.grid_dims, opts)
        f_rec = ffd.field_from_grid(grid)
        res = {"pair": i, "sample_id": e.sample_id, "mad_before": metrics.mad(f_true, np.zeros_like(f_true)),
               "mad_after": metrics.mad(f_true, f_rec)}
        db, da, hb, ha = [], [], [], []
        for m in e.sample.layer_masks:
            target = ffd.warp_mask(m, f_true)
            moved = ffd.warp_mask(m, f_rec)
            db.append(metrics.dice(m, target))
            da.append(metrics.dice(moved, target))
            hb.append(metrics.hd95(m, target, cfg.spacing))
            ha.append(metrics.hd95(moved, target, cfg.spacing))
        res.update(dice_before=np.mean(db), dice_after=np.mean(da), hd95_before=np.mean(hb), hd95_after=np.mean(ha))
        rows.append(res)
    return rows


def classification_block(cfg, entries, reg, model, sev) -> dict:
    test = [e for e in entries if e.split == "test"]
    classes = model.cluster_map.classes
    preds, truths, scores = [], [], []
    for e in test:
        feat = regressor.encode(reg, e.sample.volume)
        cluster, q, _ = dec.assign_cluster(model, feat)
        preds.append(model.cluster_map.class_of(cluster))
        truths.append(e.sample.class_label)
        scores.append([q[model.cluster_map.band(c)].sum() for c in classes])
    return metrics.classification_metrics(preds, truths, classes, np.array(scores))


def regressor_block(cfg, entries, reg) -> dict:
    """Predicted-grid field vs the classical registration to the true class atlas, on the test split."""
    test = [e for e in entries if e.split == "test" and e.sample.class_label in reg.classes]
    atlases = load_atlases(cfg, sorted({e.sample.class_label for e in test}))
    items = _items(cfg, test, atlases, 1)
    out = []
    for it in items:
        pred = regressor.predict_params(reg, it.volume, it.label)
        out.append(metrics.mad(ffd.field_from_grid(it.grid), ffd.field_from_grid(pred)))
    return {"mad_mean": float(np.mean(out)), "mad_max": float(np.max(out)), "n": len(out)}


METRICS_COLUMNS = ("block", "item", "metric", "value")


def cmd_evaluate(cfg: RunConfig) -> Path:
    p = _paths(cfg)
    reg, model, sev = load_models(p["models"])
    entries = load_dataset(cfg, with_masks=True)
    rows = []
    pairs = registration_pairs(cfg, entries)
    for r in pairs:
        for key in ("mad_before", "mad_after", "dice_before", "dice_after", "hd95_before", "hd95_after"):
            rows.append(("registration", f"pair{r['pair']}:{r['sample_id']}", key, r[key]))
    for key in ("mad_before", "mad_after", "dice_before", "dice_after", "hd95_before", "hd95_after"):
        rows.append(("registration", "mean", key, np.mean([r[key] for r in pairs])))
    cm = classification_block(cfg, entries, reg, model, sev)
    for c, vals in cm["per_class"].items():
        for key in ("sensitivity", "specificity", "auc", "support"):
            rows.append(("classification", c, key, vals[key]))
    for key in ("macro_sensitivity", "macro_specificity", "macro_auc"):
        rows.append(("classification", "macro", key, cm[key]))
    rb = regressor_block(cfg, entries, reg)
    for key, val in rb.items():
        rows.append(("regressor", "test", key, val))
    out = p["reports"] / "metrics.csv"
    write_csv(out, METRICS_COLUMNS, rows)
    return out


# ---------------------------------------------------------------------------
# leave-one-class-out


def band_occupancy(model, sev, reg, entries) -> dict:
    """Per class: fraction of the given samples whose cluster lies in that class's band."""
    out = {}
    for c in model.cluster_map.classes:
        members = [e for e in entries if e.sample.class_label == c]
        if not members:
            continue
        band = set(model.cluster_map.band(c))
        feats = regressor.encode_many(reg, [e.sample.volume for e in members])
        out[c] = float(np.mean([a in band for a in dec.hard_assign(model, feats)]))
    return out


HOLDOUT_COLUMNS = ("cluster", "severity_rank", "band", "held_out_count", "trained_test_count")


def cmd_holdout(cfg: RunConfig, held_class: str) -> Path:
    """Retrain without ``held_class`` (same k) and see where its samples land.

    Held-out samples are every volume of the held class, none of which was
    seen in training; the trained classes contribute their test split.
    """
    if held_class not in cfg.classes:
        raise PipelineError(f"held-out class {held_class!r} not in {cfg.classes}")
    if len(cfg.classes) < 3:
        raise PipelineError("the hold-out experiment needs at least 3 classes")
    p = _paths(cfg)
    full_reg, full_model, full_sev = load_models(p["models"])
    entries = load_dataset(cfg)
    trained = tuple(c for c in cfg.classes if c != held_class)
    tm = train_models(cfg, entries, trained)
    hdir = p["models"] / f"holdout_{held_class}"
    save_models(tm, hdir)

    held = [e for e in entries if e.sample.class_label == held_class]
    test = [e for e in entries if e.split == "test" and e.sample.class_label in trained]
    cm = tm.dec.cluster_map
    banded = {j for c in trained for j in cm.band(c)}
    a_held = dec.hard_assign(tm.dec, regressor.encode_many(tm.reg, [e.sample.volume for e in held]))
    a_test = dec.hard_assign(tm.dec, regressor.encode_many(tm.reg, [e.sample.volume for e in test]))
    rows = []
    for j in np.argsort(tm.sev.rank_of):
        band = cm.class_of(j) if j in banded else "none"
        rows.append((int(j) + 1, int(tm.sev.rank_of[j]), band, int(np.sum(a_held == j)), int(np.sum(a_test == j))))
    out = p["reports"] / f"holdout_{held_class}.csv"
    write_csv(out, HOLDOUT_COLUMNS, rows)

    outside = float(np.mean([a not in banded for a in a_held]))
    # diagnostic: the ranks the held class's band spans in the full model,
    # read as fixed positions on the 1..k scale of the retrained model
    full_ranks = full_sev.bands[held_class]
    in_full_band = [int(tm.sev.rank_of[a]) in full_ranks for a in a_held]
    held_test = [a for a, e in zip(a_held, held) if e.split == "test"]
    occ_hold = band_occupancy(tm.dec, tm.sev, tm.reg, test)
    occ_full = band_occupancy(full_model, full_sev, full_reg, test)
    summary = [("held_class", held_class), ("held_out_samples", len(held)),
               ("outside_trained_bands", outside),
               ("outside_trained_bands_test_split", float(np.mean([a not in banded for a in held_test]))
                if held_test else float("nan")),
               ("full_model_ranks_of_held_class", " ".join(str(r) for r in full_ranks)),
               ("held_out_in_those_ranks", float(np.mean(in_full_band)))]
    for c in trained:
        summary += [(f"occupancy_full_{c}", occ_full.get(c, float("nan"))), (f"occupancy_holdout_{c}", occ_hold[c]),
                    (f"occupancy_drop_points_{c}", 100.0 * (occ_full.get(c, float("nan")) - occ_hold[c]))]
    write_csv(p["reports"] / f"holdout_{held_class}_summary.csv", ("key", "value"), summary)
    return out


def explainability_hits(cfg: RunConfig, class_label: str) -> float:
    """Fraction of test samples of a class whose predicted max displacement falls in the pathology region."""
    rows = read_csv(_paths(cfg)["reports"] / "severity.csv")
    meta = {e.sample_id: e.sample for e in load_dataset(cfg)}
    hits = [in_bump_region(meta[r["sample_id"]], float(r["max_disp_x"]), float(r["max_disp_z"]))
            for r in rows if r["sample_id"] in meta and meta[r["sample_id"]].class_label == class_label]
    return float(np.mean(hits)) if hits else float("nan")
