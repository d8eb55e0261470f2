"""Distillation objectives (fixed-layer and cluster-averaged) and the
per-layer teacher/student distance analyzer."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .clustering import ClusterAssignment

log = logging.getLogger(__name__)

MODES = ("fixed_layers", "skill", "skill_no_avg", "skill_no_avg_student")
SKILL_MODES = MODES[1:]


def default_fixed_layers(num_layers: int) -> list[int]:
    """Four evenly spaced layers {0, L/3, 2L/3, L}, rounded (``num_layers`` = L)."""
    return sorted({int(round(k * num_layers / 3)) for k in range(4)})


def gamma_weights(selected: list[int], gamma: float, num_states: int) -> tuple[list[int], list[float]]:
    """Weight ``gamma`` on each selected layer, the remaining mass spread
    uniformly over the other layers."""
    selected = sorted(set(selected))
    rest = [i for i in range(num_states) if i not in selected]
    leftover = 1.0 - gamma * len(selected)
    if leftover < -1e-12 or gamma < 0:
        raise ValueError(f"gamma={gamma} puts more than unit mass on {len(selected)} layers")
    if not rest and abs(leftover) > 1e-12:
        raise ValueError(f"the layer set covers every state, so gamma must be 1/{len(selected)}, got {gamma}")
    if abs(leftover) <= 1e-12:
        return selected, [1.0 / len(selected)] * len(selected)
    other = leftover / len(rest)
    layers = sorted(selected + rest)
    return layers, [gamma if i in selected else other for i in layers]


def parse_gamma(text: str | float) -> float:
    return float(Fraction(text)) if isinstance(text, str) else float(text)


@dataclass
class DistillConfig:
    mode: str = "skill"
    layers: list[int] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    assignment: ClusterAssignment | None = None
    normalize: bool = False

    def validate(self, num_states: int | None = None) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown distillation mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "fixed_layers":
            if not self.layers or len(self.layers) != len(self.weights):
                raise ValueError("fixed_layers needs a non-empty layer set with one weight per layer")
            if len(set(self.layers)) != len(self.layers):
                raise ValueError(f"layer set has duplicates: {self.layers}")
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise ValueError(f"layer weights must sum to 1, got {sum(self.weights)!r}")
            if num_states is not None and any(not 0 <= i < num_states for i in self.layers):
                raise ValueError(f"layer index out of range 0..{num_states - 1}: {self.layers}")
        else:
            if self.assignment is None:
                raise ValueError(f"mode {self.mode!r} requires a cluster assignment")
            self.assignment.validate()
            if num_states is not None and self.assignment.num_layers != num_states:
                raise ValueError(
                    f"cluster assignment covers {self.assignment.num_layers} layers, model has {num_states} states"
                )

    def targets(self) -> list[str]:
        if self.mode == "fixed_layers":
            return [f"layer{i}" for i in self.layers]
        return [f"cluster{c}" for c in range(self.assignment.M)]

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "layers": list(self.layers),
            "weights": list(self.weights),
            "assignment": self.assignment.to_json() if self.assignment else None,
            "normalize": self.normalize,
        }

    @classmethod
    def from_json(cls, d: dict) -> DistillConfig:
        a = d.get("assignment")
        return cls(d["mode"], list(d.get("layers", [])), list(d.get("weights", [])), ClusterAssignment.from_json(a) if a else None, bool(d.get("normalize", False)))


def init_projections(cfg: DistillConfig, d_stu: int, d_tea: int, seed: int = 0, noise: float = 1e-3) -> dict[str, Tensor]:
    """Identity plus small Gaussian noise, one matrix per distillation target."""
    rng = np.random.default_rng([seed, 0x960])
    out = {}
    for name in cfg.targets():
        w = np.eye(d_stu, d_tea) + rng.normal(0.0, noise, size=(d_stu, d_tea))
        out[name] = ad.parameter(w)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pair_loss(x_tea, x_stu_proj) -> Tensor:
    """Mean-absolute error plus mean cosine distance over frames.

    Inputs are (..., T, d); every leading index is a frame. A frame with zero
    norm on either side gets cosine distance 1.
    """
    t = ad.as_tensor(x_tea)
    s = ad.as_tensor(x_stu_proj)
    if t.shape != s.shape:
        raise ValueError(f"pair_loss shape mismatch: {t.shape} vs {s.shape}")
    l1 = ad.absolute(s - t).mean(axis=-1).mean()
    tt = (t * t).sum(axis=-1)
    ss = (s * s).sum(axis=-1)
    zero = ((tt.data == 0.0) | (ss.data == 0.0)).astype(np.float64)
    if zero.any():
        log.warning("pair_loss: %d zero-norm frame(s), cosine distance set to 1", int(zero.sum()))
    cos = (t * s).sum(axis=-1) / (ad.sqrt(tt + zero) * ad.sqrt(ss + zero)) * (1.0 - zero)
    return l1 + (1.0 - cos).mean()


def fixed_layer_loss(tea: list, stu: list[Tensor], cfg: DistillConfig, proj: dict[str, Tensor]) -> Tensor:
    if cfg.mode != "fixed_layers":
        raise ValueError(f"fixed_layer_loss called with mode {cfg.mode!r}")
    n = len(tea)
    if any(not 0 <= i < n for i in cfg.layers):
        raise ValueError(f"layer index out of range 0..{n - 1}: {cfg.layers}")
    total = None
    for i, g in zip(cfg.layers, cfg.weights):
        term = pair_loss(tea[i], stu[i] @ proj[f"layer{i}"]) * g
        total = term if total is None else total + term
    return total


def cluster_average(states: list, members: list[int]) -> Tensor:
    if not members:
        raise ValueError("cluster has no members")
    acc = ad.as_tensor(states[members[0]])
    for m in members[1:]:
        acc = acc + states[m]
    return acc if len(members) == 1 else acc * (1.0 / len(members))


def skill_loss(tea: list, stu: list[Tensor], cfg: DistillConfig, proj: dict[str, Tensor]) -> Tensor:
    if cfg.mode not in SKILL_MODES:
        raise ValueError(f"skill_loss called with mode {cfg.mode!r}")
    a = cfg.assignment
    if a is None or a.num_layers != len(tea):
        raise ValueError(f"cluster assignment does not cover the {len(tea)} hidden states")
    total = None
    for c, members in enumerate(a.clusters):
        top = [max(members)]
        tea_members = top if cfg.mode == "skill_no_avg" else members
        stu_members = members if cfg.mode == "skill" else top
        term = pair_loss(cluster_average(tea, tea_members), cluster_average(stu, stu_members) @ proj[f"cluster{c}"])
        total = term if total is None else total + term
    if cfg.normalize:
        total = total * (1.0 / a.M)
    return total


def distill_loss(tea: list, stu: list[Tensor], cfg: DistillConfig, proj: dict[str, Tensor]) -> Tensor:
    if cfg.mode == "fixed_layers":
        return fixed_layer_loss(tea, stu, cfg, proj)
    return skill_loss(tea, stu, cfg, proj)


# ---------------------------------------------------------------------------
# distance analyzer
# ---------------------------------------------------------------------------


@dataclass
class DistanceProfile:
    l1: np.ndarray
    cosine: np.ndarray

    def to_csv(self) -> str:
        rows = ["layer,l1,cosine"]
        rows += [f"{i},{a:.12g},{c:.12g}" for i, (a, c) in enumerate(zip(self.l1, self.cosine))]
        return "\n".join(rows) + "\n"

    def write_csv(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def frame_distances(x_tea: np.ndarray, x_stu: np.ndarray) -> tuple[float, float]:
    l1 = np.abs(x_stu - x_tea).mean(axis=-1)
    nt = np.linalg.norm(x_tea, axis=-1)
    ns = np.linalg.norm(x_stu, axis=-1)
    denom = nt * ns
    ok = denom > 0
    cos = np.where(ok, (x_tea * x_stu).sum(axis=-1) / np.where(ok, denom, 1.0), 0.0)
    return float(l1.mean()), float((1.0 - cos).mean())


def distance_profile(teacher, student, samples, student_gates=None, batch_size: int = 50) -> DistanceProfile:
    """Per-layer l1 and cosine distances between unprojected teacher and
    student states, averaged over frames and samples."""
    from .model import forward_with_states

    if teacher.config.embed_dim != student.config.embed_dim:
        raise ValueError(
            "teacher and student embedding sizes differ; distance_profile compares states "
            "directly, use projected distances instead"
        )
    samples = samples.samples if hasattr(samples, "samples") else np.asarray(samples)
    n_states = teacher.config.num_layers + 1
    l1 = np.zeros(n_states)
    cos = np.zeros(n_states)
    total = 0
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            tea = forward_with_states(teacher, chunk)
            stu = forward_with_states(student, chunk, student_gates)
            for i in range(n_states):
                a, c = frame_distances(tea[i].data, stu[i].data)
                l1[i] += a * len(chunk)
                cos[i] += c * len(chunk)
            total += len(chunk)
    return DistanceProfile(l1 / total, cos / total)
