"""Toy self-supervised transformer: conv frontend + pre-LN transformer stack.

The model exposes every hidden state X_0..X_L (X_0 is the frontend output
projected to the embedding size) and accepts multiplicative gates on conv
output channels, attention heads and FFN hidden units. Gate blocks are keyed
``conv.<i>``, ``head.<layer>`` and ``ffn.<layer>`` (layers counted from 1).
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import store
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    conv_layers: tuple[tuple[int, int, int], ...] = ((32, 3, 2),)
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 64
    input_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        dims = [self.embed_dim, self.num_layers, self.num_heads, self.ffn_dim, self.input_dim]
        if any(v < 1 for v in dims) or any(v < 1 for c in self.conv_layers for v in c):
            raise ValueError("all model dimensions must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, _, s in self.conv_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(c) for c in self.conv_layers]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        d = dict(d)
        d["conv_layers"] = tuple(tuple(c) for c in d.get("conv_layers", cls.conv_layers))
        return cls(**d)


@dataclass
class GateBlock:
    name: str
    kind: str  # conv-channel | attention-head | ffn-unit
    layer: int
    size: int
    group_params: int


@dataclass
class ToySSLModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config)

    # -- architecture queries --------------------------------------------------
    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def conv_channels(self, i: int) -> int:
        return self.params[f"conv{i}.weight"].shape[0]

    def heads(self, layer: int) -> int:
        return self.params[f"layer{layer}.attn.q.weight"].shape[1] // self.config.head_dim

    def ffn_units(self, layer: int) -> int:
        return self.params[f"layer{layer}.ffn.in.weight"].shape[1]

    def gate_blocks(self) -> list[GateBlock]:
        cfg = self.config
        d, dh = cfg.embed_dim, cfg.head_dim
        blocks = []
        n_conv = len(cfg.conv_layers)
        for i in range(n_conv):
            c_in, k = self.params[f"conv{i}.weight"].shape[1:]
            per = c_in * k + 1 + (d if i == n_conv - 1 else 0)
            blocks.append(GateBlock(f"conv.{i}", "conv-channel", 0, self.conv_channels(i), per))
        for layer in range(1, cfg.num_layers + 1):
            blocks.append(GateBlock(f"head.{layer}", "attention-head", layer, self.heads(layer), 4 * d * dh + 3 * dh))
            blocks.append(GateBlock(f"ffn.{layer}", "ffn-unit", layer, self.ffn_units(layer), 2 * d + 1))
        return blocks

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> ToySSLModel:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def copy(self) -> ToySSLModel:
        return ToySSLModel(self.config, {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.params.items()})

    # -- forward ---------------------------------------------------------------
    def __call__(self, x, gates=None) -> list[Tensor]:
        return forward_with_states(self, x, gates)


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    d, f = cfg.embed_dim, cfg.ffn_dim
    hd = cfg.num_heads * cfg.head_dim
    p: dict[str, np.ndarray] = {}

    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    c_in = cfg.input_dim
    for i, (c_out, k, _) in enumerate(cfg.conv_layers):
        p[f"conv{i}.weight"] = normal((c_out, c_in, k), c_in * k)
        p[f"conv{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    p["proj.weight"] = normal((c_in, d), c_in)
    p["proj.bias"] = np.zeros(d)
    for layer in range(1, cfg.num_layers + 1):
        pre = f"layer{layer}."
        p[pre + "ln1.weight"] = np.ones(d)
        p[pre + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v"):
            p[pre + f"attn.{name}.weight"] = normal((d, hd), d)
            p[pre + f"attn.{name}.bias"] = np.zeros(hd)
        p[pre + "attn.out.weight"] = normal((hd, d), hd) / math.sqrt(2 * cfg.num_layers)
        p[pre + "ln2.weight"] = np.ones(d)
        p[pre + "ln2.bias"] = np.zeros(d)
        p[pre + "ffn.in.weight"] = normal((d, f), d)
        p[pre + "ffn.in.bias"] = np.zeros(f)
        p[pre + "ffn.out.weight"] = normal((f, d), f) / math.sqrt(2 * cfg.num_layers)
    return {k: ad.parameter(v) for k, v in p.items()}


def _gate(gates, name: str, size: int):
    if gates is None:
        return None
    g = gates[name]
    g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    if g.shape != (size,):
        raise ValueError(f"gate block {name!r} has shape {g.shape}, expected ({size},)")
    return g


def check_gates(model: ToySSLModel, gates: Mapping) -> None:
    names = {b.name for b in model.gate_blocks()}
    missing = names - set(gates)
    if missing:
        raise ValueError(f"gates missing for blocks: {sorted(missing)}")


def frontend(model: ToySSLModel, x, gates=None) -> Tensor:
    cfg = model.config
    h = x
    for i, (_, k, stride) in enumerate(cfg.conv_layers):
        P = model.params
        h = ad.conv1d(h, P[f"conv{i}.weight"], P[f"conv{i}.bias"], stride=stride, padding=(k - 1) // 2)
        h = ad.gelu(h)
        g = _gate(gates, f"conv.{i}", model.conv_channels(i))
        if g is not None:
            h = h * g
    return h @ model.params["proj.weight"] + model.params["proj.bias"]


def attention(model: ToySSLModel, layer: int, a: Tensor, gate) -> Tensor | None:
    P = model.params
    pre = f"layer{layer}.attn."
    H, dh = model.heads(layer), model.config.head_dim
    if H == 0:
        return None
    B, T, _ = a.shape

    def split(t):  # (B,T,H*dh) -> (B,H,T,dh)
        return ad.transpose(t.reshape(B, T, H, dh), (0, 2, 1, 3))

    q = split(a @ P[pre + "q.weight"] + P[pre + "q.bias"])
    k = split(a @ P[pre + "k.weight"] + P[pre + "k.bias"])
    v = split(a @ P[pre + "v.weight"] + P[pre + "v.bias"])
    att = ad.softmax((q @ ad.transpose(k)) * (1.0 / math.sqrt(dh)), axis=-1)
    o = att @ v
    if gate is not None:
        o = o * gate.reshape(1, H, 1, 1)
    o = ad.transpose(o, (0, 2, 1, 3)).reshape(B, T, H * dh)
    return o @ P[pre + "out.weight"]


def feedforward(model: ToySSLModel, layer: int, f: Tensor, gate) -> Tensor | None:
    P = model.params
    pre = f"layer{layer}.ffn."
    if model.ffn_units(layer) == 0:
        return None
    u = ad.gelu(f @ P[pre + "in.weight"] + P[pre + "in.bias"])
    if gate is not None:
        u = u * gate
    return u @ P[pre + "out.weight"]


def forward_with_states(model: ToySSLModel, x, gates: Mapping | None = None) -> list[Tensor]:
    """Return the L+1 hidden states for input ``x`` of shape (T, input_dim)
    or (B, T, input_dim); states keep the batch layout of the input."""
    x = ad.as_tensor(x)
    cfg = model.config
    if x.ndim not in (2, 3) or x.shape[-1] != cfg.input_dim:
        raise ValueError(f"expected input (..., T, {cfg.input_dim}), got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("input contains non-finite values")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if gates is not None:
        check_gates(model, gates)
    P = model.params
    h = frontend(model, x, gates)
    states = [h]
    for layer in range(1, cfg.num_layers + 1):
        pre = f"layer{layer}."
        a = ad.layer_norm(h, P[pre + "ln1.weight"], P[pre + "ln1.bias"])
        att = attention(model, layer, a, _gate(gates, f"head.{layer}", model.heads(layer)))
        if att is not None:
            h = h + att
        f = ad.layer_norm(h, P[pre + "ln2.weight"], P[pre + "ln2.bias"])
        ff = feedforward(model, layer, f, _gate(gates, f"ffn.{layer}", model.ffn_units(layer)))
        if ff is not None:
            h = h + ff
        states.append(h)
    if squeeze:
        states = [s.reshape(s.shape[1:]) for s in states]
    return states


def identity_stack(model: ToySSLModel) -> ToySSLModel:
    """Zero every residual-branch output so all L+1 states equal X_0."""
    for layer in range(1, model.num_layers + 1):
        for name in ("attn.out.weight", "ffn.out.weight"):
            p = model.params[f"layer{layer}.{name}"]
            p.data = np.zeros_like(p.data)
    return model


def all_ones_gates(model: ToySSLModel) -> dict[str, np.ndarray]:
    return {b.name: np.ones(b.size) for b in model.gate_blocks()}


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def _alive(gates, name, size) -> int:
    if gates is None:
        return size
    g = np.asarray(gates[name].data if isinstance(gates[name], Tensor) else gates[name], dtype=np.float64)
    if g.shape != (size,):
        raise ValueError(f"gate block {name!r} has shape {g.shape}, expected ({size},)")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError(f"count_params needs deterministic 0/1 gates; block {name!r} has fractional values")
    return int(g.sum())


def count_params(model: ToySSLModel, gates: Mapping | None = None) -> int:
    """Parameters surviving 0/1 gating (all parameters when ``gates`` is None)."""
    cfg = model.config
    d, dh = cfg.embed_dim, cfg.head_dim
    total = 0
    c_prev = cfg.input_dim
    for i, (_, k, _) in enumerate(cfg.conv_layers):
        c = _alive(gates, f"conv.{i}", model.conv_channels(i))
        total += c * c_prev * k + c
        c_prev = c
    total += c_prev * d + d
    for layer in range(1, cfg.num_layers + 1):
        h = _alive(gates, f"head.{layer}", model.heads(layer))
        f = _alive(gates, f"ffn.{layer}", model.ffn_units(layer))
        total += 4 * d  # two layer norms
        total += h * (4 * d * dh + 3 * dh)
        total += f * (2 * d + 1)
    return total


def non_prunable_count(model: ToySSLModel) -> int:
    """Projection bias and layer norms: never removed by structured pruning."""
    return model.config.embed_dim + 4 * model.config.embed_dim * model.config.num_layers


def prunable_count(model: ToySSLModel) -> int:
    return count_params(model) - non_prunable_count(model)


def init_student_from_teacher(teacher: ToySSLModel) -> ToySSLModel:
    """Trainable deep copy of ``teacher``; the teacher is frozen in place."""
    student = teacher.copy().requires_grad_(True)
    teacher.requires_grad_(False)
    return student


# ---------------------------------------------------------------------------
# teacher pretraining: masked-frame reconstruction
# ---------------------------------------------------------------------------


def init_head(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 0x4EAD])
    out = cfg.total_stride * cfg.input_dim
    return {
        "head.weight": ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(cfg.embed_dim), size=(cfg.embed_dim, out))),
        "head.bias": ad.parameter(np.zeros(out)),
    }


def frame_mask(batch: int, T: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(fraction * T))
    mask = np.zeros((batch, T))
    for b in range(batch):
        if n:
            mask[b, rng.choice(T, size=n, replace=False)] = 1.0
    return mask


def masked_reconstruction_loss(model: ToySSLModel, head: dict[str, Tensor], x: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean l1 error on masked input frames; masked frames are zeroed in the input."""
    x = np.asarray(x, dtype=np.float64)
    B, T, C = x.shape
    if mask.sum() == 0:
        return Tensor(0.0)
    corrupted = x * (1.0 - mask)[..., None]
    top = forward_with_states(model, corrupted)[-1]
    pred = top @ head["head.weight"] + head["head.bias"]
    S = model.config.total_stride
    pred = pred.reshape(B, top.shape[1] * S, C)
    n = min(T, pred.shape[1])
    diff = ad.absolute(pred[:, :n, :] - x[:, :n, :])
    weights = mask[:, :n, None] / (mask[:, :n].sum() * C)
    return (diff * weights).sum()


@dataclass
class PretrainResult:
    model: ToySSLModel
    head: dict[str, Tensor]
    losses: list[float]


def pretrain_teacher(
    model: ToySSLModel,
    corpus,
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-3,
    warmup_steps: int | None = None,
    mask_fraction: float = 0.15,
    seed: int = 0,
) -> PretrainResult:
    """Train ``model`` in place with masked-frame l1 reconstruction."""
    from .data import batch_indices

    if steps <= 0:
        raise ValueError(f"steps must be positive, got {steps}")
    samples = corpus.samples if hasattr(corpus, "samples") else np.asarray(corpus)
    if len(samples) == 0:
        raise ValueError("corpus is empty")
    head = init_head(model.config)
    model.requires_grad_(True)
    warmup = steps // 10 if warmup_steps is None else warmup_steps
    opt = ad.Adam(
        [{"name": "main", "params": model.parameters() + list(head.values()), "lr": lr}],
        warmup_steps=warmup,
        total_steps=steps,
    )
    losses = []
    for step in range(1, steps + 1):
        x = samples[batch_indices(len(samples), batch_size, seed, step)]
        mask = frame_mask(x.shape[0], x.shape[1], mask_fraction, np.random.default_rng([seed, step, 0x3A5C]))
        opt.zero_grad()
        loss = masked_reconstruction_loss(model, head, x, mask)
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    return PretrainResult(model, head, losses)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_arrays(model: ToySSLModel, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in model.params.items()}


def model_from_arrays(config: ModelConfig, arrays: Mapping[str, np.ndarray], prefix: str = "", requires_grad: bool = False) -> ToySSLModel:
    params = {
        k[len(prefix) :]: Tensor(np.array(v), requires_grad) for k, v in arrays.items() if k.startswith(prefix)
    }
    return ToySSLModel(config, params)


def save_model(model: ToySSLModel, path: str | os.PathLike, extra: Mapping[str, np.ndarray] | None = None) -> str:
    arrays = model_arrays(model)
    if extra:
        arrays.update(extra)
    return store.save_arrays(path, arrays, {"kind": "ToySSLModel", "config": model.config.to_dict()})


def load_model(path: str | os.PathLike) -> ToySSLModel:
    arrays, meta = store.load_arrays(path)
    cfg = ModelConfig.from_dict(meta["config"])
    keep = {k: v for k, v in arrays.items() if not k.startswith("head.")}
    return model_from_arrays(cfg, keep)


def params_checksum(model: ToySSLModel) -> str:
    blob = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes() for v in model.params.values())
    return store.sha256_bytes(blob)
