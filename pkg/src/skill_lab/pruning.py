"""Hard Concrete gates, expected sparsity, the Lagrangian sparsity penalty
and physical removal of pruned groups."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ToySSLModel, count_params, non_prunable_count

NEAR_DEAD = 0.02


@dataclass(frozen=True)
class HardConcrete:
    beta: float = 2.0 / 3.0
    l: float = -0.1
    r: float = 1.1

    def __post_init__(self):
        if not (self.l < 0.0 < 1.0 < self.r) or self.beta <= 0:
            raise ValueError(f"need l < 0 < 1 < r and beta > 0, got {self}")

    @property
    def log_ratio(self) -> float:
        return math.log(-self.l / self.r)


HC = HardConcrete()


def sample_gate(log_alpha, u, hc: HardConcrete = HC) -> Tensor:
    """Reparameterized Hard Concrete sample for uniform draw(s) ``u`` in (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    noise = np.log(u) - np.log1p(-u)
    s = ad.sigmoid((ad.as_tensor(log_alpha) + noise) * (1.0 / hc.beta))
    return ad.clamp(s * (hc.r - hc.l) + hc.l, 0.0, 1.0)


def prob_nonzero(log_alpha, hc: HardConcrete = HC) -> Tensor:
    """P(z > 0) under the Hard Concrete distribution."""
    return ad.sigmoid(ad.as_tensor(log_alpha) - hc.beta * hc.log_ratio)


def deterministic_gate(log_alpha, hc: HardConcrete = HC) -> np.ndarray:
    la = np.asarray(log_alpha.data if isinstance(log_alpha, Tensor) else log_alpha, dtype=np.float64)
    return np.clip(ad._sigmoid_np(la) * (hc.r - hc.l) + hc.l, 0.0, 1.0)


def uniform_draw(size: int, seed: int, step: int, stream: int = 0) -> np.ndarray:
    """Open-interval uniforms that depend only on (seed, step, stream)."""
    u = np.random.default_rng([seed, step, 0x6A7E, stream]).random(size) + 2.0**-54
    return np.clip(u, 2.0**-54, 1.0 - 2.0**-53)


# ---------------------------------------------------------------------------
# group catalog and gate parameters
# ---------------------------------------------------------------------------


@dataclass
class GroupEntry:
    id: str
    kind: str
    layer: int
    param_count: int


@dataclass
class GroupCatalog:
    blocks: list  # list[GateBlock]

    @classmethod
    def from_model(cls, model: ToySSLModel) -> GroupCatalog:
        return cls(model.gate_blocks())

    @property
    def entries(self) -> list[GroupEntry]:
        return [
            GroupEntry(f"{b.name}.{j}", b.kind, b.layer, b.group_params) for b in self.blocks for j in range(b.size)
        ]

    @property
    def total(self) -> int:
        return sum(b.size * b.group_params for b in self.blocks)

    def __len__(self) -> int:
        return sum(b.size for b in self.blocks)


def expected_sparsity(log_alpha: dict, catalog: GroupCatalog, hc: HardConcrete = HC) -> Tensor:
    """1 - (expected surviving prunable parameters) / (all prunable parameters)."""
    if not catalog.blocks or catalog.total == 0:
        raise ValueError("group catalog is empty")
    kept = None
    for b in catalog.blocks:
        if b.size == 0:
            continue
        term = prob_nonzero(log_alpha[b.name], hc).sum() * float(b.group_params)
        kept = term if kept is None else kept + term
    return 1.0 - kept * (1.0 / catalog.total)


def lagrangian_penalty(s, t_now: float, lambda1, lambda2) -> Tensor:
    gap = ad.as_tensor(s) - t_now
    return ad.as_tensor(lambda1) * gap + ad.as_tensor(lambda2) * gap * gap


@dataclass
class PruningGates:
    """Learnable log-alpha per gate block of a model."""

    catalog: GroupCatalog
    log_alpha: dict[str, Tensor]
    hc: HardConcrete = HC

    @classmethod
    def for_model(cls, model: ToySSLModel, init_mean: float = 0.01, init_std: float = 0.01, seed: int = 0, hc: HardConcrete = HC) -> PruningGates:
        # init_mean is the initial dropout probability per group
        catalog = GroupCatalog.from_model(model)
        rng = np.random.default_rng([seed, 0x1A])
        centre = math.log(1.0 - init_mean) - math.log(init_mean)
        la = {b.name: ad.parameter(rng.normal(centre, init_std, size=b.size)) for b in catalog.blocks}
        return cls(catalog, la, hc)

    def parameters(self) -> list[Tensor]:
        return list(self.log_alpha.values())

    def sample(self, seed: int, step: int) -> dict[str, Tensor]:
        out = {}
        for k, b in enumerate(self.catalog.blocks):
            out[b.name] = sample_gate(self.log_alpha[b.name], uniform_draw(b.size, seed, step, k), self.hc)
        return out

    def deterministic(self) -> dict[str, np.ndarray]:
        return {name: deterministic_gate(la, self.hc) for name, la in self.log_alpha.items()}

    def expected_sparsity(self) -> Tensor:
        return expected_sparsity(self.log_alpha, self.catalog, self.hc)


@dataclass
class SparsityController:
    target: float
    ramp_steps: int = 0
    lambda1: Tensor = field(default_factory=lambda: ad.parameter(0.0))
    lambda2: Tensor = field(default_factory=lambda: ad.parameter(0.0))

    def __post_init__(self):
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target sparsity must be in [0, 1), got {self.target}")

    def target_at(self, step: int) -> float:
        if self.ramp_steps <= 0:
            return self.target
        return self.target * min(1.0, step / self.ramp_steps)

    def penalty(self, s: Tensor, step: int) -> Tensor:
        return lagrangian_penalty(s, self.target_at(step), self.lambda1, self.lambda2)

    def parameters(self) -> list[Tensor]:
        return [self.lambda1, self.lambda2]


# ---------------------------------------------------------------------------
# architecture finalization
# ---------------------------------------------------------------------------


def _gate_array(gates, name) -> np.ndarray:
    g = gates[name]
    return np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)


def finalize_architecture(student: ToySSLModel, gates: dict) -> tuple[ToySSLModel, dict]:
    """Remove groups whose gate is exactly 0 and fold surviving gate values
    into the weights that consume the gated outputs."""
    cfg = student.config
    P = {k: v.data for k, v in student.params.items()}
    dh = cfg.head_dim
    new: dict[str, np.ndarray] = {}
    report_layers = []
    conv_report = []

    keep_prev = np.arange(cfg.input_dim)
    scale_prev = np.ones(cfg.input_dim)
    for i in range(len(cfg.conv_layers)):
        z = _gate_array(gates, f"conv.{i}")
        keep = np.flatnonzero(z > 0)
        w = P[f"conv{i}.weight"][:, keep_prev, :] * scale_prev[None, :, None]
        new[f"conv{i}.weight"] = w[keep]
        new[f"conv{i}.bias"] = P[f"conv{i}.bias"][keep]
        conv_report.append({"conv": i, "channels_before": int(z.size), "channels_after": int(keep.size)})
        keep_prev, scale_prev = keep, z[keep]
    new["proj.weight"] = P["proj.weight"][keep_prev] * scale_prev[:, None]
    new["proj.bias"] = P["proj.bias"]

    for layer in range(1, cfg.num_layers + 1):
        pre = f"layer{layer}."
        for n in ("ln1.weight", "ln1.bias", "ln2.weight", "ln2.bias"):
            new[pre + n] = P[pre + n]
        zh = _gate_array(gates, f"head.{layer}")
        heads = np.flatnonzero(zh > 0)
        cols = (heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
        for n in ("q", "k", "v"):
            new[pre + f"attn.{n}.weight"] = P[pre + f"attn.{n}.weight"][:, cols]
            new[pre + f"attn.{n}.bias"] = P[pre + f"attn.{n}.bias"][cols]
        new[pre + "attn.out.weight"] = P[pre + "attn.out.weight"][cols] * np.repeat(zh[heads], dh)[:, None]
        zf = _gate_array(gates, f"ffn.{layer}")
        units = np.flatnonzero(zf > 0)
        new[pre + "ffn.in.weight"] = P[pre + "ffn.in.weight"][:, units]
        new[pre + "ffn.in.bias"] = P[pre + "ffn.in.bias"][units]
        new[pre + "ffn.out.weight"] = P[pre + "ffn.out.weight"][units] * zf[units][:, None]
        report_layers.append(
            {
                "layer": layer,
                "heads_before": int(zh.size),
                "heads_after": int(heads.size),
                "ffn_before": int(zf.size),
                "ffn_after": int(units.size),
                "removed": bool(heads.size == 0 and units.size == 0),
            }
        )

    order = list(student.params)
    shrunk = ToySSLModel(cfg, {k: ad.Tensor(np.ascontiguousarray(new[k]), student.params[k].requires_grad) for k in order})
    before = count_params(student)
    after = count_params(shrunk)
    residue = non_prunable_count(student)
    all_gates = np.concatenate([_gate_array(gates, b.name) for b in student.gate_blocks()])
    report = {
        "conv": conv_report,
        "layers": report_layers,
        "params_before": before,
        "params_after": after,
        "prunable_before": before - residue,
        "prunable_after": after - residue,
        "structural_sparsity": 1.0 - (after - residue) / (before - residue),
        "whole_model_sparsity": 1.0 - after / before,
        "removed_groups": int((all_gates == 0).sum()),
        "near_dead_groups": int(((all_gates > 0) & (all_gates <= NEAR_DEAD)).sum()),
        "gates": {name: [float(v) for v in _gate_array(gates, name)] for name in sorted(gates)},
    }
    return shrunk, report
