"""Average-linkage agglomerative clustering of layers on 1 - CKA."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_M_GRID = (2, 3, 4, 6, 8)


@dataclass
class ClusterAssignment:
    M: int
    clusters: list[list[int]]
    merge_trace: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return sum(len(c) for c in self.clusters)

    @property
    def assignment(self) -> dict[int, int]:
        return {layer: cid for cid, members in enumerate(self.clusters) for layer in members}

    def validate(self, num_layers: int | None = None) -> None:
        layers = sorted(l for c in self.clusters for l in c)
        n = len(layers)
        if num_layers is not None and n != num_layers:
            raise ValueError(f"assignment covers {n} layers, expected {num_layers}")
        if layers != list(range(n)):
            raise ValueError("every layer must be assigned exactly once")
        if any(not c for c in self.clusters) or len(self.clusters) != self.M:
            raise ValueError("clusters must be non-empty and number exactly M")

    def to_json(self) -> dict:
        return {
            "M": self.M,
            "clusters": [list(c) for c in self.clusters],
            "merge_trace": [[a, b, d] for a, b, d in self.merge_trace],
        }

    @classmethod
    def from_json(cls, d: dict) -> ClusterAssignment:
        out = cls(int(d["M"]), [list(map(int, c)) for c in d["clusters"]], [(int(a), int(b), float(x)) for a, b, x in d.get("merge_trace", [])])
        out.validate()
        return out

    @classmethod
    def singletons(cls, num_layers: int) -> ClusterAssignment:
        return cls(num_layers, [[i] for i in range(num_layers)], [])


def canonical(clusters) -> list[list[int]]:
    return sorted((sorted(c) for c in clusters), key=lambda c: c[0])


def _linkage(dist: np.ndarray, a: list[int], b: list[int]) -> float:
    total = 0.0
    for i in a:
        for j in b:
            total += dist[i, j]
    return total / (len(a) * len(b))


def candidate_pairs(clusters: list[list[int]], dist: np.ndarray, contiguous: bool):
    """(distance, min-a, min-b, ia, ib) for every mergeable pair, with min-a < min-b."""
    out = []
    for ia in range(len(clusters)):
        for ib in range(ia + 1, len(clusters)):
            a, b = clusters[ia], clusters[ib]
            if contiguous and not (a[-1] + 1 == b[0] or b[-1] + 1 == a[0]):
                continue
            out.append((_linkage(dist, a, b), a[0], b[0], ia, ib))
    return out


def agglomerate(sim: np.ndarray, M: int, contiguous: bool = False) -> ClusterAssignment:
    """Bottom-up merge of singletons down to ``M`` clusters.

    Distance between clusters is the mean pairwise (1 - similarity). Ties are
    broken by the lowest smallest-member index, then the lowest second one.
    With ``contiguous`` only clusters adjacent in depth may merge.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"M must be in [1, {n}], got {M}")
    dist = 1.0 - sim
    clusters = [[i] for i in range(n)]
    trace = []
    while len(clusters) > M:
        d, ma, mb, ia, ib = min(candidate_pairs(clusters, dist, contiguous), key=lambda c: c[:3])
        merged = sorted(clusters[ia] + clusters[ib])
        clusters = canonical([c for k, c in enumerate(clusters) if k not in (ia, ib)] + [merged])
        trace.append((ma, mb, float(d)))
    return ClusterAssignment(M, canonical(clusters), trace)


def cluster_report(assignment: ClusterAssignment, sim: np.ndarray) -> dict:
    """Members plus within- and between-cluster mean similarity.

    A singleton's within-cluster similarity is reported as 1; the
    between-cluster mean is ``None`` when there is a single cluster.
    """
    sim = np.asarray(sim)
    label = assignment.assignment
    per_cluster = []
    for members in assignment.clusters:
        pairs = [sim[i, j] for k, i in enumerate(members) for j in members[k + 1 :]]
        per_cluster.append({"members": list(members), "within_mean": float(np.mean(pairs)) if pairs else 1.0})
    n = sim.shape[0]
    between = [sim[i, j] for i in range(n) for j in range(i + 1, n) if label[i] != label[j]]
    within_all = [c["within_mean"] for c in per_cluster]
    return {
        "M": assignment.M,
        "clusters": per_cluster,
        "within_mean": float(np.mean(within_all)),
        "between_mean": float(np.mean(between)) if between else None,
    }


def m_grid(num_layers: int, grid=DEFAULT_M_GRID) -> list[int]:
    return [m for m in grid if 1 <= m <= num_layers]


def write_assignment(assignment: ClusterAssignment, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(assignment.to_json(), indent=2) + "\n", encoding="utf-8")


def read_assignment(path: str | os.PathLike) -> ClusterAssignment:
    return ClusterAssignment.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
