import numpy as np
import pytest

from skill_lab.clustering import (
    ClusterAssignment,
    agglomerate,
    candidate_pairs,
    cluster_report,
    m_grid,
    read_assignment,
    write_assignment,
)


def random_sim(rng, n):
    x = rng.normal(size=(n, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return np.clip(x @ x.T, 0.0, 1.0)


def test_all_singletons():
    out = agglomerate(np.eye(5), 5)
    assert out.clusters == [[i] for i in range(5)] and out.merge_trace == []


def test_single_cluster():
    out = agglomerate(np.eye(4), 1)
    assert out.clusters == [[0, 1, 2, 3]] and len(out.merge_trace) == 3


def test_three_layer_example():
    sim = np.full((3, 3), 0.1)
    np.fill_diagonal(sim, 1.0)
    sim[0, 1] = sim[1, 0] = 0.99
    out = agglomerate(sim, 2)
    assert out.clusters == [[0, 1], [2]]
    assert out.merge_trace == [(0, 1, pytest.approx(0.01))]


@pytest.mark.parametrize("M", [0, 6])
def test_m_out_of_range(M):
    with pytest.raises(ValueError):
        agglomerate(np.eye(5), M)


def test_ties_broken_by_lowest_indices():
    out = agglomerate(np.eye(4), 3)
    assert out.merge_trace[0][:2] == (0, 1)


def test_deterministic_and_trace_minimal(rng):
    sim = random_sim(rng, 9)
    for M in range(1, 10):
        a, b = agglomerate(sim, M), agglomerate(sim, M)
        assert a == b
        assert len(a.merge_trace) == 9 - M
        a.validate(9)
    # replay: each recorded merge is the minimum over available pairs
    clusters = [[i] for i in range(9)]
    for ma, mb, d in agglomerate(sim, 1).merge_trace:
        best = min(c[0] for c in candidate_pairs(clusters, 1 - sim, False))
        assert d == best
        ia = next(i for i, c in enumerate(clusters) if c[0] == ma)
        ib = next(i for i, c in enumerate(clusters) if c[0] == mb)
        merged = sorted(clusters[ia] + clusters[ib])
        clusters = sorted([c for k, c in enumerate(clusters) if k not in (ia, ib)] + [merged])


def test_permutation_equivariance(rng):
    sim = random_sim(rng, 7)
    perm = rng.permutation(7)
    a = agglomerate(sim, 3)
    b = agglomerate(sim[np.ix_(perm, perm)], 3)
    mapped = sorted(sorted(int(perm[i]) for i in c) for c in b.clusters)
    assert mapped == sorted(a.clusters)


def test_contiguous_variant(rng):
    sim = np.eye(5)
    sim[0, 4] = sim[4, 0] = 0.99
    assert [0, 4] in agglomerate(sim, 4).clusters
    out = agglomerate(sim, 2, contiguous=True)
    assert all(c == list(range(c[0], c[-1] + 1)) for c in out.clusters)


def test_report_conventions():
    sim = np.ones((4, 4))
    rep = cluster_report(agglomerate(sim, 4), sim)
    assert all(c["within_mean"] == 1.0 for c in rep["clusters"])
    assert rep["between_mean"] == 1.0
    assert cluster_report(agglomerate(sim, 1), sim)["between_mean"] is None


def test_default_grid():
    assert m_grid(13) == [2, 3, 4, 6, 8]
    assert m_grid(5) == [2, 3, 4]


def test_json_roundtrip(tmp_path, rng):
    out = agglomerate(random_sim(rng, 6), 3)
    write_assignment(out, tmp_path / "a.json")
    assert read_assignment(tmp_path / "a.json") == out


def test_invalid_assignment_rejected():
    with pytest.raises(ValueError):
        ClusterAssignment.from_json({"M": 2, "clusters": [[0, 1], [1, 2]]})
