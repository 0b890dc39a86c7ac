"""Agglomerative clustering of risk profiles and vulnerability labelling.

Leaves are always processed in patient-id order and equal-distance merges are
broken by the lexicographic pair of cluster labels (the smallest patient id in
each cluster), so the tree does not depend on input order.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .risk import RiskProfile

log = logging.getLogger(__name__)


class Linkage(enum.Enum):
    COMPLETE = "complete"
    AVERAGE = "average"


class Metric(enum.Enum):
    EUCLIDEAN = "euclidean"


class Transform(enum.Enum):
    NONE = "none"
    SQRT = "sqrt"  # back to mg/dL-like units: sqrt(S) * |y - f|
    LOG1P = "log1p"


class Order(enum.Enum):
    TIME = "time"
    SORTED = "sorted"  # compare risk distributions rather than timings


@dataclass(frozen=True)
class ProfilePrep:
    """How profiles are turned into equal-length vectors before distancing.

    Profiles are linearly resampled to the shortest profile's length, then
    optionally sorted, transformed, averaged into ``bins`` equal segments and
    standardised per profile.
    """

    standardize: bool = True
    transform: Transform = Transform.NONE
    bins: int | None = None
    order: Order = Order.TIME

    def __post_init__(self) -> None:
        object.__setattr__(self, "transform", Transform(self.transform))
        object.__setattr__(self, "order", Order(self.order))
        if self.bins is not None and self.bins < 1:
            raise ValueError("bins must be >= 1")


def resample(values: np.ndarray, length: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size == length:
        return values.copy()
    if values.size == 1:
        return np.full(length, values[0])
    src = np.linspace(0.0, 1.0, values.size)
    return np.interp(np.linspace(0.0, 1.0, length), src, values)


def _bin_means(values: np.ndarray, bins: int) -> np.ndarray:
    edges = np.linspace(0, values.size, bins + 1).round().astype(int)
    return np.array([values[a:b].mean() if b > a else values[min(a, values.size - 1)] for a, b in zip(edges[:-1], edges[1:])])


def prepare_profiles(
    profiles: Sequence[RiskProfile], prep: ProfilePrep = ProfilePrep()
) -> tuple[list[str], np.ndarray]:
    """Return patient ids (sorted) and the matrix of prepared profile vectors."""
    if not profiles:
        raise ValueError("no profiles")
    by_id = {}
    for p in profiles:
        if len(p) == 0:
            raise ValueError(f"empty profile for {p.patient_id}")
        if p.patient_id in by_id:
            raise ValueError(f"duplicate profile for {p.patient_id}")
        by_id[p.patient_id] = p
    ids = sorted(by_id)
    length = min(len(p) for p in profiles)
    rows = []
    for pid in ids:
        v = resample(by_id[pid].values, length)
        if prep.order is Order.SORTED:
            v = np.sort(v)
        if prep.transform is Transform.SQRT:
            v = np.sqrt(v)
        elif prep.transform is Transform.LOG1P:
            v = np.log1p(v)
        if prep.bins is not None:
            v = _bin_means(v, min(prep.bins, length))
        if prep.standardize:
            sd = v.std()
            v = (v - v.mean()) / sd if sd > 0 else v - v.mean()
        rows.append(v)
    return ids, np.vstack(rows)


def profile_distance(
    a: RiskProfile,
    b: RiskProfile,
    metric: Metric = Metric.EUCLIDEAN,
    prep: ProfilePrep = ProfilePrep(standardize=False),
) -> float:
    """Distance between two profiles after the same preparation used for clustering."""
    if Metric(metric) is not Metric.EUCLIDEAN:
        raise ValueError(f"unsupported metric {metric}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty profile")
    if a.patient_id == b.patient_id:
        b = RiskProfile(b.patient_id + "\0", b.timestamps, b.values)
    _, M = prepare_profiles([a, b], prep)
    return float(np.sqrt(np.sum((M[0] - M[1]) ** 2)))


def distance_matrix(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = np.sqrt(np.sum((M[i] - M[j]) ** 2))
    return D


# ---------------------------------------------------------------------------
# Dendrogram


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge tree in the usual numbering: leaves ``0..n-1``, merge ``i`` creates node ``n+i``."""

    leaves: tuple[str, ...]
    merges: tuple[Merge, ...]

    def __post_init__(self) -> None:
        if len(self.merges) != len(self.leaves) - 1:
            raise ValueError("a dendrogram over n leaves needs n - 1 merges")
        hs = self.heights
        if hs.size > 1 and np.any(np.diff(hs) < 0):
            raise ValueError("merge heights must be non-decreasing")

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges], dtype=float)

    def members(self, node: int) -> list[str]:
        n = len(self.leaves)
        if node < n:
            return [self.leaves[node]]
        m = self.merges[node - n]
        return sorted(self.members(m.left) + self.members(m.right))

    def to_dict(self) -> dict:
        return {
            "leaves": list(self.leaves),
            "merges": [
                {"left": m.left, "right": m.right, "height": m.height, "size": m.size}
                for m in self.merges
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Dendrogram":
        return cls(
            tuple(d["leaves"]),
            tuple(Merge(int(m["left"]), int(m["right"]), float(m["height"]), int(m["size"])) for m in d["merges"]),
        )

    def to_newick(self) -> str:
        n = len(self.leaves)

        def render(node: int, parent_height: float) -> str:
            if node < n:
                own = 0.0
                text = self.leaves[node]
            else:
                m = self.merges[node - n]
                own = m.height
                text = f"({render(m.left, own)},{render(m.right, own)})"
            return f"{text}:{parent_height - own:.6g}"

        if n == 1:
            return f"{self.leaves[0]};"
        m = self.merges[-1]
        return f"({render(m.left, m.height)},{render(m.right, m.height)});"

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def agglomerate_matrix(
    ids: Sequence[str], D: np.ndarray, linkage: Linkage = Linkage.COMPLETE
) -> Dendrogram:
    """Agglomerate from a precomputed distance matrix whose rows follow ``ids``."""
    linkage = Linkage(linkage)
    n = len(ids)
    if n < 2:
        raise ValueError("need at least 2 profiles to cluster")
    if len(set(ids)) != n:
        raise ValueError("patient ids must be unique")
    order = sorted(range(n), key=lambda i: ids[i])
    leaves = tuple(ids[i] for i in order)
    D = np.asarray(D, dtype=float)[np.ix_(order, order)]

    # active clusters: node id -> (label, size); label = smallest member id
    label = {i: leaves[i] for i in range(n)}
    size = {i: 1 for i in range(n)}
    dist: dict[tuple[int, int], float] = {(i, j): D[i, j] for i in range(n) for j in range(i + 1, n)}
    merges = []
    for step in range(n - 1):
        best = None
        for (a, b), d in dist.items():
            key = (d, min(label[a], label[b]), max(label[a], label[b]))
            if best is None or key < best[0]:
                best = (key, a, b)
        (height, _, _), a, b = best
        if label[a] > label[b]:
            a, b = b, a
        new = n + step
        merges.append(Merge(a, b, float(height), size[a] + size[b]))
        rest = [k for k in label if k not in (a, b)]
        for k in rest:
            da = dist[(min(a, k), max(a, k))]
            db = dist[(min(b, k), max(b, k))]
            if linkage is Linkage.COMPLETE:
                dnew = max(da, db)
            else:
                dnew = (size[a] * da + size[b] * db) / (size[a] + size[b])
            dist[(k, new)] = dnew
        dist = {pair: d for pair, d in dist.items() if a not in pair and b not in pair}
        label[new] = label[a]
        size[new] = size[a] + size[b]
        for k in (a, b):
            del label[k], size[k]
    return Dendrogram(leaves, tuple(merges))


def agglomerate(
    profiles: Sequence[RiskProfile],
    metric: Metric = Metric.EUCLIDEAN,
    linkage: Linkage = Linkage.COMPLETE,
    prep: ProfilePrep = ProfilePrep(),
) -> Dendrogram:
    if Metric(metric) is not Metric.EUCLIDEAN:
        raise ValueError(f"unsupported metric {metric}")
    if len(profiles) < 2:
        raise ValueError("need at least 2 profiles to cluster")
    ids, M = prepare_profiles(profiles, prep)
    return agglomerate_matrix(ids, distance_matrix(M), linkage)


def cut_at(d: Dendrogram, n_merges: int) -> list[list[str]]:
    """Clusters after applying the first ``n_merges`` merges, sorted by first member."""
    n = len(d.leaves)
    parent = list(range(n + len(d.merges)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, m in enumerate(d.merges[:n_merges]):
        parent[find(m.left)] = n + i
        parent[find(m.right)] = n + i
    groups: dict[int, list[str]] = {}
    for i, pid in enumerate(d.leaves):
        groups.setdefault(find(i), []).append(pid)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def max_gap_index(d: Dendrogram) -> int:
    """Index of the merge that the largest-gap rule removes (with all later ones).

    The gap of merge ``i`` is its height minus that of merge ``i - 1``. Ties go
    to the later merge. With no positive gap the final merge is removed.
    """
    h = d.heights
    if h.size < 2:
        return h.size - 1
    gaps = np.diff(h)
    best = float(gaps.max())
    if best <= 0:
        return h.size - 1
    return int(np.flatnonzero(gaps == best)[-1]) + 1


def cut_by_max_gap(d: Dendrogram) -> list[list[str]]:
    if len(d.leaves) < 2:
        raise ValueError("need at least 2 leaves")
    return cut_at(d, max_gap_index(d))


# ---------------------------------------------------------------------------
# Labelling


@dataclass(frozen=True)
class VulnerabilityClusters:
    less_vulnerable: frozenset[str]
    more_vulnerable: frozenset[str]

    def __post_init__(self) -> None:
        less, more = frozenset(self.less_vulnerable), frozenset(self.more_vulnerable)
        if not less or not more:
            raise ValueError("both clusters must be non-empty")
        if less & more:
            raise ValueError(f"clusters overlap: {sorted(less & more)}")
        object.__setattr__(self, "less_vulnerable", less)
        object.__setattr__(self, "more_vulnerable", more)

    @property
    def patients(self) -> frozenset[str]:
        return self.less_vulnerable | self.more_vulnerable

    def label_of(self, patient_id: str) -> str:
        if patient_id in self.less_vulnerable:
            return "less_vulnerable"
        if patient_id in self.more_vulnerable:
            return "more_vulnerable"
        raise KeyError(patient_id)

    def to_dict(self) -> dict:
        return {
            "less_vulnerable": sorted(self.less_vulnerable),
            "more_vulnerable": sorted(self.more_vulnerable),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VulnerabilityClusters":
        return cls(frozenset(d["less_vulnerable"]), frozenset(d["more_vulnerable"]))

    @classmethod
    def union(cls, parts: Sequence["VulnerabilityClusters"]) -> "VulnerabilityClusters":
        less = frozenset().union(*(p.less_vulnerable for p in parts))
        more = frozenset().union(*(p.more_vulnerable for p in parts))
        return cls(less, more)


def _mean_rate(cluster: Sequence[str], rates: Mapping[str, float | None]) -> float:
    vals = []
    for pid in cluster:
        r = rates.get(pid)
        if r is None:
            raise ValueError(f"missing success rate for {pid}")
        vals.append(float(r))
    return float(np.mean(vals))


def label_clusters(
    partition: Sequence[Sequence[str]], success_rates: Mapping[str, float | None]
) -> VulnerabilityClusters:
    """The cluster with the lower mean attack success rate is less vulnerable."""
    if len(partition) != 2:
        raise ValueError(f"labelling needs exactly 2 clusters, got {len(partition)}")
    a, b = (sorted(c) for c in partition)
    ra, rb = _mean_rate(a, success_rates), _mean_rate(b, success_rates)
    if ra == rb:
        warnings.warn(
            f"clusters have equal mean success rate {ra:.3f}; the smaller one is labelled less vulnerable",
            stacklevel=2,
        )
        less, more = sorted((a, b), key=lambda c: (len(c), c))
    else:
        less, more = (a, b) if ra < rb else (b, a)
    return VulnerabilityClusters(frozenset(less), frozenset(more))


@dataclass(frozen=True)
class GroupClustering:
    """Clustering outcome for one group of patients (e.g. one data subset)."""

    group: str
    dendrogram: Dendrogram
    partition: list[list[str]]
    clusters: VulnerabilityClusters | None
    mean_rates: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "dendrogram": self.dendrogram.to_dict(),
            "newick": self.dendrogram.to_newick(),
            "partition": self.partition,
            "clusters": None if self.clusters is None else self.clusters.to_dict(),
            "mean_success_rate": self.mean_rates,
        }


def cluster_group(
    group: str,
    profiles: Sequence[RiskProfile],
    success_rates: Mapping[str, float | None],
    linkage: Linkage = Linkage.COMPLETE,
    prep: ProfilePrep = ProfilePrep(),
) -> GroupClustering:
    d = agglomerate(profiles, Metric.EUCLIDEAN, linkage, prep)
    partition = cut_by_max_gap(d)
    labels = label_clusters(partition, success_rates) if len(partition) == 2 else None
    means = {c[0]: _mean_rate(c, success_rates) for c in partition}
    if labels is not None:
        assert _mean_rate(sorted(labels.less_vulnerable), success_rates) <= _mean_rate(
            sorted(labels.more_vulnerable), success_rates
        )
    return GroupClustering(group, d, partition, labels, means)
