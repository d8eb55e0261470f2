"""Linear-kernel CKA between teacher layers over a calibration set."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ToySSLModel, forward_with_states

EPS = 1e-12
POOLING = ("mean", "frames")


class DegenerateLayerError(ValueError):
    """Raised when a layer's centered Gram matrix has (numerically) zero HSIC."""


def collect_activations(
    teacher: ToySSLModel,
    calibration,
    pooling: str = "mean",
    frames_per_sample: int = 4,
) -> list[np.ndarray]:
    """One activation matrix per layer (L+1 of them).

    ``mean`` pools each sample's T'×d state over time into one row (N rows);
    ``frames`` keeps ``frames_per_sample`` evenly spaced frames per sample
    (N·frames_per_sample rows).
    """
    samples = calibration.samples if hasattr(calibration, "samples") else np.asarray(calibration)
    if len(samples) == 0:
        raise ValueError("calibration set is empty")
    if pooling not in POOLING:
        raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLING}")
    with ad.no_grad():
        states = [s.data for s in forward_with_states(teacher, samples)]
    if pooling == "mean":
        return [s.mean(axis=1) for s in states]
    T = states[0].shape[1]
    idx = np.unique(np.linspace(0, T - 1, num=min(frames_per_sample, T)).round().astype(int))
    return [s[:, idx, :].reshape(-1, s.shape[-1]) for s in states]


def gram(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"gram needs an N×d matrix with N >= 2, got shape {x.shape}")
    return x @ x.T


def center(k: np.ndarray) -> np.ndarray:
    """H K H without forming H."""
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimator tr(K H L H) / (N-1)^2."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"hsic needs two square matrices of equal size, got {k.shape} and {l.shape}")
    n = k.shape[0]
    if n < 2:
        raise ValueError("hsic needs N >= 2")
    # tr(HKH L) = sum_ij (HKH)_ij L_ji
    return float(np.sum(center(k) * l.T) / (n - 1) ** 2)


def cka(k: np.ndarray, l: np.ndarray, names: tuple[str, str] = ("K", "L")) -> float:
    kl = hsic(k, l)
    kk = hsic(k, k)
    ll = hsic(l, l)
    for value, name in ((kk, names[0]), (ll, names[1])):
        if value <= EPS:
            raise DegenerateLayerError(f"{name} has zero variance after centering (HSIC={value:.3g})")
    return kl / np.sqrt(kk * ll)


def cka_features(x: np.ndarray, y: np.ndarray) -> float:
    return cka(gram(x), gram(y))


def similarity_from_activations(acts: list[np.ndarray]) -> np.ndarray:
    grams = [gram(a) for a in acts]
    n = len(grams)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i, n):
            sim[i, j] = sim[j, i] = cka(grams[i], grams[j], (f"layer {i}", f"layer {j}"))
    return sim


def similarity_matrix(teacher: ToySSLModel, calibration, pooling: str = "mean", frames_per_sample: int = 4) -> np.ndarray:
    """(L+1)×(L+1) CKA matrix over the teacher's hidden states."""
    return similarity_from_activations(collect_activations(teacher, calibration, pooling, frames_per_sample))


def check_similarity(sim: np.ndarray, tol: float = 1e-10) -> None:
    sim = np.asarray(sim)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    if not np.allclose(sim, sim.T, atol=tol, rtol=0):
        raise ValueError("similarity matrix is not symmetric")
    if not np.allclose(np.diag(sim), 1.0, atol=tol, rtol=0):
        raise ValueError("similarity matrix diagonal is not 1")
    if sim.min() < -tol or sim.max() > 1 + tol:
        raise ValueError("similarity entries outside [0, 1]")


def format_similarity_csv(sim: np.ndarray) -> str:
    n = sim.shape[0]
    lines = [",".join(f"layer_{i}" for i in range(n))]
    lines += [",".join(f"{v:.12g}" for v in row) for row in sim]
    return "\n".join(lines) + "\n"


def write_similarity_csv(sim: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_text(format_similarity_csv(sim), encoding="utf-8")


def read_similarity_csv(path: str | os.PathLike) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def adjacent_vs_distant(sim: np.ndarray) -> tuple[float, float]:
    """Mean similarity of depth-adjacent pairs and of pairs at least 2 apart."""
    n = sim.shape[0]
    adj = [sim[i, i + 1] for i in range(n - 1)]
    far = [sim[i, j] for i in range(n) for j in range(i + 2, n)]
    return float(np.mean(adj)), float(np.mean(far)) if far else float("nan")
