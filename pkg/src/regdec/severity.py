"""Severity scale over ordered clusters, the distance-based severity
probability, and longitudinal patient profiles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dec import ClusterClassMap


class SeverityError(ValueError):
    pass


@dataclass
class SeverityModel:
    rank_of: np.ndarray  # (k,) severity rank 1..k of each cluster (0-based cluster index)
    bands: dict  # class name -> sorted list of ranks

    def __post_init__(self):
        self.rank_of = np.asarray(self.rank_of, dtype=int)
        k = len(self.rank_of)
        if sorted(self.rank_of.tolist()) != list(range(1, k + 1)):
            raise SeverityError("severity ordering is not a bijection onto 1..k")

    @property
    def k(self) -> int:
        return len(self.rank_of)

    @property
    def cluster_at_rank(self) -> np.ndarray:
        out = np.empty(self.k, dtype=int)
        out[self.rank_of - 1] = np.arange(self.k)
        return out

    def to_rank_order(self, per_cluster) -> np.ndarray:
        """Reorder a per-cluster array so that entry r-1 belongs to severity rank r."""
        return np.asarray(per_cluster)[self.cluster_at_rank]

    def class_of_rank(self, rank: int) -> str:
        for name, ranks in self.bands.items():
            if rank in ranks:
                return name
        raise SeverityError(f"rank {rank} belongs to no band")


def order_clusters(cluster_map: ClusterClassMap, assignments, displacement_magnitudes) -> SeverityModel:
    """Rank clusters by mapped class (least diseased first), then by the mean
    dense-field displacement magnitude of their members.

    ``assignments`` and ``displacement_magnitudes`` are per training sample.
    Clusters without members sort last within their class; remaining ties go
    to the lower cluster index.
    """
    assignments = np.asarray(assignments)
    mags = np.asarray(displacement_magnitudes, dtype=np.float64)
    if assignments.shape != mags.shape:
        raise SeverityError("assignments and displacement magnitudes differ in length")
    k = len(cluster_map.cluster_class)
    mean_disp = np.full(k, np.inf)
    for j in range(k):
        members = mags[assignments == j]
        if len(members):
            mean_disp[j] = members.mean()
    order = sorted(range(k), key=lambda j: (int(cluster_map.cluster_class[j]), mean_disp[j], j))
    rank_of = np.empty(k, dtype=int)
    for r, j in enumerate(order, start=1):
        rank_of[j] = r
    bands = {name: sorted(int(rank_of[j]) for j in range(k) if cluster_map.cluster_class[j] == ci)
             for ci, name in enumerate(cluster_map.classes)}
    cluster_map.severity_order = rank_of.copy()
    return SeverityModel(rank_of, bands)


class SeverityProbability(NamedTuple):
    p_d: float
    raw: float
    clamped: bool
    degenerate: bool


def severity_probability(distances, assigned_rank: int) -> SeverityProbability:
    """``|(d_i - d_1) / (d_k - d_i)|`` with distances listed in severity-rank order.

    ``d_1``/``d_k`` are the distances to the least/most severe centroids and
    ``d_i`` the distance to the assigned one. Values above 1 are clamped and
    flagged; a zero denominator reports 1 and is flagged degenerate.
    """
    d = np.asarray(distances, dtype=np.float64)
    k = len(d)
    if k < 2:
        raise SeverityError("need at least two clusters")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise SeverityError("distances must be finite and non-negative")
    if not 1 <= assigned_rank <= k:
        raise SeverityError(f"rank {assigned_rank} outside 1..{k}")
    d1, di, dk = d[0], d[assigned_rank - 1], d[-1]
    if dk == di:
        return SeverityProbability(1.0, float("inf"), True, True)
    raw = abs((di - d1) / (dk - di))
    return SeverityProbability(min(raw, 1.0), raw, raw > 1.0, False)


@dataclass
class SeverityReport:
    sample_id: str
    cluster: int  # 0-based cluster index
    severity_rank: int
    p_d: float
    raw_p_d: float
    clamped: bool
    degenerate: bool
    distances: np.ndarray  # latent distances in severity-rank order
    predicted_class: str
    class_source: str = "dec"
    displacement: dict = field(default_factory=dict)
    patient_id: int = 0
    visit_index: int = 0


@dataclass
class PatientProfile:
    patient_id: int
    visits: list  # (visit_index, p_d), increasing visit index
    slope: float  # least-squares change of p_d per visit
    interval_rates: list  # change of p_d per visit between consecutive visits


def build_profile(reports) -> PatientProfile:
    """Severity trajectory of one patient over their visits."""
    reports = sorted(reports, key=lambda r: r.visit_index)
    if not reports:
        raise SeverityError("profile needs at least one visit")
    pids = {r.patient_id for r in reports}
    if len(pids) != 1:
        raise SeverityError(f"reports span several patients: {sorted(pids)}")
    idx = np.array([r.visit_index for r in reports], dtype=np.float64)
    if len(np.unique(idx)) != len(idx):
        raise SeverityError("duplicate visit index")
    pd = np.array([r.p_d for r in reports], dtype=np.float64)
    slope = 0.0
    if len(idx) > 1:
        xc = idx - idx.mean()
        slope = float(np.sum(xc * (pd - pd.mean())) / np.sum(xc * xc))
    rates = (np.diff(pd) / np.diff(idx)).tolist()
    return PatientProfile(pids.pop(), list(zip(idx.astype(int).tolist(), pd.tolist())), slope, rates)
