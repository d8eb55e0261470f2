"""Deterministic synthetic corpora and calibration subsets."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import store

FAMILIES = ("sinusoid-mixture", "piecewise-tones", "gaussian-ar")
DEFAULT_CALIBRATION_SIZE = 200
NOISE_CLIP = 3.0


@dataclass(frozen=True)
class CorpusSpec:
    num_samples: int = 512
    seq_len: int = 64
    input_dim: int = 8
    seed: int = 0
    family: str = "sinusoid-mixture"
    noise_std: float = 0.1

    def validate(self) -> None:
        if self.num_samples <= 0:
            raise ValueError(f"num_samples must be positive, got {self.num_samples}")
        if self.seq_len <= 0 or self.input_dim <= 0:
            raise ValueError("seq_len and input_dim must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown corpus family {self.family!r}; expected one of {FAMILIES}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class Corpus:
    spec: CorpusSpec
    samples: np.ndarray  # (D, T, input_dim)
    checksum: str = ""

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class CalibrationSet:
    samples: np.ndarray  # (N, T, input_dim)
    indices: list[int] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.samples.shape[0]


def _noise(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # clipped so the per-channel amplitude bound is a hard bound
    return np.clip(rng.normal(0.0, 1.0, size=shape), -NOISE_CLIP, NOISE_CLIP) * std


def _sinusoid_mixture(rng, T, C, std):
    t = np.arange(T, dtype=np.float64)
    x = np.zeros((T, C))
    amp_sum = np.zeros(C)
    for c in range(C):
        k = int(rng.integers(3, 9))
        amps = rng.uniform(0.1, 0.5, size=k)
        freqs = rng.uniform(0.01, 0.25, size=k)
        phases = rng.uniform(0.0, 2 * np.pi, size=k)
        for a, f, p in zip(amps, freqs, phases):
            x[:, c] += a * np.sin(2 * np.pi * f * t + p)
        amp_sum[c] = amps.sum()
    return x + _noise(rng, (T, C), std), amp_sum


def _piecewise_tones(rng, T, C, std):
    t = np.arange(T, dtype=np.float64)
    x = np.zeros((T, C))
    amp_max = np.zeros(C)
    start = 0
    while start < T:
        length = int(rng.integers(max(2, T // 8), max(3, T // 2) + 1))
        stop = min(T, start + length)
        amps = rng.uniform(0.2, 1.0, size=C)
        freqs = rng.uniform(0.02, 0.3, size=C)
        phases = rng.uniform(0.0, 2 * np.pi, size=C)
        seg = t[start:stop, None]
        x[start:stop] = amps * np.sin(2 * np.pi * freqs * seg + phases)
        amp_max = np.maximum(amp_max, amps)
        start = stop
    return x + _noise(rng, (T, C), std), amp_max


def _gaussian_ar(rng, T, C, std):
    q, _ = np.linalg.qr(rng.normal(size=(C, C)))
    rho = rng.uniform(0.8, 0.95)
    A = rho * q
    x = np.zeros((T, C))
    state = rng.normal(size=C)
    for i in range(T):
        state = A @ state + rng.normal(0.0, 0.3, size=C)
        x[i] = state
    return x + _noise(rng, (T, C), std), None


_GENERATORS = {
    "sinusoid-mixture": _sinusoid_mixture,
    "piecewise-tones": _piecewise_tones,
    "gaussian-ar": _gaussian_ar,
}


def generate_sample(spec: CorpusSpec, index: int, with_info: bool = False):
    """One sequence, seeded only by ``(spec.seed, index)``.

    With ``with_info`` also returns the per-channel amplitude sum (or max
    tone amplitude for piecewise tones; ``None`` for the AR family).
    """
    rng = np.random.default_rng([spec.seed, index])
    x, info = _GENERATORS[spec.family](rng, spec.seq_len, spec.input_dim, spec.noise_std)
    return (x, info) if with_info else x


def build_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate()
    samples = np.stack([generate_sample(spec, i) for i in range(spec.num_samples)])
    return Corpus(spec=spec, samples=samples, checksum=store.sha256_bytes(samples.astype("<f8").tobytes()))


def generate_corpus(spec: CorpusSpec, path: str | os.PathLike | None = None) -> Corpus:
    """Build the corpus and, when ``path`` is given, write manifest.json + data.bin there."""
    corpus = build_corpus(spec)
    if path is not None:
        save_corpus(corpus, path)
    return corpus


def save_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(corpus.samples, dtype="<f8").tobytes()
    per = corpus.spec.seq_len * corpus.spec.input_dim
    (path / store.BLOB).write_bytes(blob)
    store.dump_json(
        {
            "spec": asdict(corpus.spec),
            "shape": list(corpus.samples.shape),
            "offsets": [i * per for i in range(len(corpus))],
            "dtype": "<f8",
            "checksum": store.sha256_bytes(blob),
        },
        path / store.MANIFEST,
    )


def load_corpus(path: str | os.PathLike) -> Corpus:
    path = Path(path)
    manifest = store.read_manifest(path)
    blob = (path / store.BLOB).read_bytes()
    if store.sha256_bytes(blob) != manifest["checksum"]:
        raise store.ChecksumError(f"checksum mismatch in {path / store.BLOB}: corpus is corrupted")
    samples = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(manifest["shape"])
    return Corpus(spec=CorpusSpec(**manifest["spec"]), samples=samples, checksum=manifest["checksum"])


def draw_calibration(corpus: Corpus, N: int = DEFAULT_CALIBRATION_SIZE, seed: int = 0) -> CalibrationSet:
    """Seeded subset of ``N`` distinct samples, kept in corpus order."""
    D = len(corpus)
    if N < 2:
        raise ValueError(f"calibration needs N >= 2 samples, got {N}")
    if N > D:
        raise ValueError(f"calibration size N={N} exceeds corpus size D={D}")
    if N == D:
        idx = np.arange(D)
    else:
        idx = np.sort(np.random.default_rng([seed, 0xCA1]).choice(D, size=N, replace=False))
    return CalibrationSet(samples=corpus.samples[idx], indices=[int(i) for i in idx])


def batch_indices(num_samples: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Indices of the training batch for ``step``; a pure function of its arguments."""
    rng = np.random.default_rng([seed, step, 0xBA7C])
    return rng.choice(num_samples, size=batch, replace=batch > num_samples)
