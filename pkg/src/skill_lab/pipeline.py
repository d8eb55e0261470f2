"""Two-stage distill-and-prune training.

Stage 1 trains the student, the distillation projections and the Hard
Concrete log-alphas on distillation loss + Lagrangian sparsity penalty
while the multipliers take ascent steps. The deterministic gates then fix
the architecture, and stage 2 keeps distilling the shrunk student.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import store
from .data import Corpus, batch_indices
from .losses import DistillConfig, distill_loss, init_projections
from .model import ModelConfig, ToySSLModel, forward_with_states, init_student_from_teacher, model_from_arrays, params_checksum
from .pruning import HardConcrete, PruningGates, SparsityController, finalize_architecture

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class StageConfig:
    steps: int
    warmup_steps: int = 0
    lr_main: float = 2e-4
    lr_aux: float = 2e-2
    batch_sequences: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError("warmup_steps must be within [0, steps]")
        if self.batch_sequences <= 0:
            raise ValueError("batch_sequences must be positive")


# Reference recipe at full scale; desk runs shrink all step counts by one factor.
REFERENCE_STAGE1 = StageConfig(steps=50_000, warmup_steps=15_000, lr_main=2e-4, lr_aux=2e-2)
REFERENCE_STAGE2 = StageConfig(steps=25_000, warmup_steps=5_000, lr_main=1e-4, lr_aux=0.0)
REFERENCE_RAMP_STEPS = 5_000
REFERENCE_TARGET = 0.75


def scaled_recipe(scale: float) -> tuple[StageConfig, StageConfig, int]:
    """Full-scale step counts multiplied by ``scale`` (ratios preserved)."""

    def sc(n):
        return max(1, int(round(n * scale)))

    s1 = StageConfig(sc(REFERENCE_STAGE1.steps), sc(REFERENCE_STAGE1.warmup_steps), REFERENCE_STAGE1.lr_main, REFERENCE_STAGE1.lr_aux)
    s2 = StageConfig(sc(REFERENCE_STAGE2.steps), sc(REFERENCE_STAGE2.warmup_steps), REFERENCE_STAGE2.lr_main, 0.0)
    return s1, s2, sc(REFERENCE_RAMP_STEPS)


@dataclass
class PruningConfig:
    target: float = 0.5
    ramp_steps: int = 300
    init_mean: float = 0.01
    beta: float = 2.0 / 3.0
    l: float = -0.1
    r: float = 1.1

    def validate(self) -> None:
        if not 0.0 <= self.target < 1.0:
            raise ValueError(f"target sparsity must be in [0, 1), got {self.target}")
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be non-negative")
        self.hc

    @property
    def hc(self) -> HardConcrete:
        return HardConcrete(self.beta, self.l, self.r)


@dataclass
class RunManifest:
    teacher_ref: str
    corpus_ref: str
    distill: DistillConfig
    pruning: PruningConfig
    stage1: StageConfig
    stage2: StageConfig

    def to_json(self) -> dict:
        return {
            "teacher_ref": self.teacher_ref,
            "corpus_ref": self.corpus_ref,
            "distill": self.distill.to_json(),
            "pruning": asdict(self.pruning),
            "stage1": asdict(self.stage1),
            "stage2": asdict(self.stage2),
        }

    @classmethod
    def from_json(cls, d: dict) -> RunManifest:
        return cls(
            d["teacher_ref"],
            d["corpus_ref"],
            DistillConfig.from_json(d["distill"]),
            PruningConfig(**d["pruning"]),
            StageConfig(**d["stage1"]),
            StageConfig(**d["stage2"]),
        )

    def content_hash(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def make_manifest(teacher: ToySSLModel, corpus: Corpus, distill: DistillConfig, pruning: PruningConfig, stage1: StageConfig, stage2: StageConfig) -> RunManifest:
    distill.validate(teacher.config.num_layers + 1)
    pruning.validate()
    stage1.validate()
    stage2.validate()
    return RunManifest(
        "sha256:" + params_checksum(teacher), "sha256:" + corpus.checksum, distill, pruning, stage1, stage2
    )


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    stage: int
    step: int
    student: ToySSLModel
    proj: dict[str, ad.Tensor]
    optimizer: ad.Adam
    gates: PruningGates | None = None
    controller: SparsityController | None = None
    finalized: bool = False
    report: dict | None = None
    metrics: list[dict] = field(default_factory=list)


class TeacherCache:
    """Teacher hidden states for every corpus sample, computed once."""

    def __init__(self, teacher: ToySSLModel, samples: np.ndarray, chunk: int = 64):
        parts = []
        with ad.no_grad():
            for start in range(0, len(samples), chunk):
                parts.append([s.data for s in forward_with_states(teacher, samples[start : start + chunk])])
        self.states = [np.concatenate([p[i] for p in parts]) for i in range(len(parts[0]))]

    def batch(self, idx: np.ndarray) -> list[np.ndarray]:
        return [s[idx] for s in self.states]


def _stage1_optimizer(student, proj, gates, controller, cfg: StageConfig) -> ad.Adam:
    return ad.Adam(
        [
            {"name": "main", "params": student.parameters() + list(proj.values()), "lr": cfg.lr_main},
            {"name": "log_alpha", "params": gates.parameters(), "lr": cfg.lr_aux},
            {"name": "lambda", "params": controller.parameters(), "lr": cfg.lr_aux, "maximize": True},
        ],
        warmup_steps=cfg.warmup_steps,
        total_steps=cfg.steps,
    )


def _stage2_optimizer(student, proj, cfg: StageConfig) -> ad.Adam:
    return ad.Adam(
        [{"name": "main", "params": student.parameters() + list(proj.values()), "lr": cfg.lr_main}],
        warmup_steps=cfg.warmup_steps,
        total_steps=cfg.steps,
    )


def init_stage1(manifest: RunManifest, teacher: ToySSLModel) -> TrainState:
    student = init_student_from_teacher(teacher)
    d = teacher.config.embed_dim
    proj = init_projections(manifest.distill, d, d, seed=manifest.stage1.seed)
    pc = manifest.pruning
    gates = PruningGates.for_model(student, init_mean=pc.init_mean, seed=manifest.stage1.seed, hc=pc.hc)
    controller = SparsityController(pc.target, pc.ramp_steps)
    opt = _stage1_optimizer(student, proj, gates, controller, manifest.stage1)
    return TrainState(1, 0, student, proj, opt, gates, controller)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {f"student/{k}": v.data for k, v in state.student.params.items()}
    arrays.update({f"proj/{k}": v.data for k, v in state.proj.items()})
    if state.gates is not None:
        arrays.update({f"log_alpha/{k}": v.data for k, v in state.gates.log_alpha.items()})
    if state.controller is not None:
        arrays["lambda/1"] = state.controller.lambda1.data
        arrays["lambda/2"] = state.controller.lambda2.data
    arrays.update({f"opt/{k}": v for k, v in state.optimizer.state_arrays().items()})
    return arrays


def save_checkpoint(state: TrainState, path: str | os.PathLike, manifest: RunManifest) -> str:
    meta = {
        "stage": state.stage,
        "step": state.step,
        "optimizer_step": state.optimizer.step_count,
        "finalized": state.finalized,
        "manifest": manifest.to_json(),
        "manifest_hash": manifest.content_hash(),
        "model_config": state.student.config.to_dict(),
        "report": state.report,
    }
    return store.save_arrays(path, state_arrays(state), meta)


def load_checkpoint(path: str | os.PathLike) -> tuple[TrainState, RunManifest]:
    arrays, meta = store.load_arrays(path)
    manifest = RunManifest.from_json(meta["manifest"])
    cfg = ModelConfig.from_dict(meta["model_config"])
    student = model_from_arrays(cfg, {k[8:]: v for k, v in arrays.items() if k.startswith("student/")}, requires_grad=True)
    proj = {k[5:]: ad.parameter(v) for k, v in arrays.items() if k.startswith("proj/")}
    opt_arrays = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    if meta["stage"] == 1:
        pc = manifest.pruning
        gates = PruningGates.for_model(student, init_mean=pc.init_mean, hc=pc.hc)
        for k in gates.log_alpha:
            gates.log_alpha[k] = ad.parameter(arrays[f"log_alpha/{k}"])
        controller = SparsityController(pc.target, pc.ramp_steps, ad.parameter(arrays["lambda/1"]), ad.parameter(arrays["lambda/2"]))
        opt = _stage1_optimizer(student, proj, gates, controller, manifest.stage1)
        state = TrainState(1, meta["step"], student, proj, opt, gates, controller, finalized=meta["finalized"])
    else:
        opt = _stage2_optimizer(student, proj, manifest.stage2)
        state = TrainState(2, meta["step"], student, proj, opt, finalized=meta["finalized"], report=meta.get("report"))
    opt.load_state_arrays(opt_arrays, meta["optimizer_step"])
    return state, manifest


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _record(fp, rec: dict) -> None:
    if fp is not None:
        fp.write(json.dumps(rec) + "\n")


def _check_finite(value: float, state: TrainState, manifest: RunManifest, run_dir) -> None:
    if math.isfinite(value):
        return
    if run_dir is not None:
        save_checkpoint(state, Path(run_dir) / f"ckpt_stage{state.stage}_last_good", manifest)
    raise DivergenceError(f"non-finite loss at stage {state.stage} step {state.step + 1}")


def run_stage1(
    manifest: RunManifest,
    teacher: ToySSLModel,
    corpus: Corpus,
    state: TrainState | None = None,
    stop_after: int | None = None,
    metrics_path: str | os.PathLike | None = None,
    run_dir: str | os.PathLike | None = None,
    cache: TeacherCache | None = None,
) -> TrainState:
    """Joint distillation and pruning; resumes from ``state`` when given."""
    cfg = manifest.stage1
    state = state or init_stage1(manifest, teacher)
    if state.stage != 1:
        raise ValueError("run_stage1 needs a stage-1 state")
    cache = cache or TeacherCache(teacher, corpus.samples)
    last = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    fp = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < last:
            step = state.step + 1
            idx = batch_indices(len(corpus), cfg.batch_sequences, cfg.seed, step)
            x = corpus.samples[idx]
            tea = cache.batch(idx)
            z = state.gates.sample(cfg.seed, step)
            stu = forward_with_states(state.student, x, z)
            loss_d = distill_loss(tea, stu, manifest.distill, state.proj)
            s = state.gates.expected_sparsity()
            t_now = state.controller.target_at(step)
            lam1, lam2 = state.controller.lambda1.item(), state.controller.lambda2.item()
            pen = state.controller.penalty(s, step)
            total = loss_d + pen
            _check_finite(total.item(), state, manifest, run_dir)
            lrs = state.optimizer.current_lrs()
            state.optimizer.zero_grad()
            ad.backward(total)
            state.optimizer.step()
            state.step = step
            rec = {
                "stage": 1,
                "step": step,
                "loss_distill": loss_d.item(),
                "loss_penalty": pen.item(),
                "sparsity": s.item(),
                "target": t_now,
                "lambda1": lam1,
                "lambda2": lam2,
                "lr_main": lrs["main"],
                "lr_aux": lrs["log_alpha"],
            }
            state.metrics.append(rec)
            _record(fp, rec)
    finally:
        if fp is not None:
            fp.close()
    return state


def finalize_state(state: TrainState, manifest: RunManifest) -> TrainState:
    """Stage-1 state -> fresh stage-2 state on the shrunk architecture."""
    if state.stage != 1 or state.finalized:
        raise ValueError("finalization applies exactly once, to a stage-1 state")
    shrunk, report = finalize_architecture(state.student, state.gates.deterministic())
    shrunk.requires_grad_(True)
    report["expected_sparsity"] = state.gates.expected_sparsity().item()
    report["target"] = manifest.pruning.target
    report["lambda1"] = state.controller.lambda1.item()
    report["lambda2"] = state.controller.lambda2.item()
    proj = {k: ad.parameter(v.data.copy()) for k, v in state.proj.items()}
    opt = _stage2_optimizer(shrunk, proj, manifest.stage2)
    return TrainState(2, 0, shrunk, proj, opt, finalized=True, report=report)


def run_stage2(
    manifest: RunManifest,
    teacher: ToySSLModel,
    corpus: Corpus,
    state: TrainState,
    stop_after: int | None = None,
    metrics_path: str | os.PathLike | None = None,
    run_dir: str | os.PathLike | None = None,
    cache: TeacherCache | None = None,
) -> TrainState:
    """Distillation-only training of the finalized student. A stage-1 state
    is finalized first."""
    if state.stage == 1:
        state = finalize_state(state, manifest)
    cfg = manifest.stage2
    cache = cache or TeacherCache(teacher, corpus.samples)
    last = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    rep = state.report or {}
    fp = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.step < last:
            step = state.step + 1
            idx = batch_indices(len(corpus), cfg.batch_sequences, cfg.seed, 10_000_000 + step)
            tea = cache.batch(idx)
            stu = forward_with_states(state.student, corpus.samples[idx])
            loss_d = distill_loss(tea, stu, manifest.distill, state.proj)
            _check_finite(loss_d.item(), state, manifest, run_dir)
            lrs = state.optimizer.current_lrs()
            state.optimizer.zero_grad()
            ad.backward(loss_d)
            state.optimizer.step()
            state.step = step
            rec = {
                "stage": 2,
                "step": step,
                "loss_distill": loss_d.item(),
                "loss_penalty": 0.0,
                "sparsity": rep.get("structural_sparsity"),
                "target": manifest.pruning.target,
                "lambda1": rep.get("lambda1"),
                "lambda2": rep.get("lambda2"),
                "lr_main": lrs["main"],
                "lr_aux": 0.0,
            }
            state.metrics.append(rec)
            _record(fp, rec)
    finally:
        if fp is not None:
            fp.close()
    return state


def evaluate_distill_loss(manifest: RunManifest, teacher: ToySSLModel, corpus: Corpus, student: ToySSLModel, proj, gates=None, idx=None) -> float:
    """Distillation loss on a batch (the stage-1 batch of step 1 by default)."""
    if idx is None:
        idx = batch_indices(len(corpus), manifest.stage1.batch_sequences, manifest.stage1.seed, 1)
    x = corpus.samples[idx]
    with ad.no_grad():
        tea = [s.data for s in forward_with_states(teacher, x)]
        stu = forward_with_states(student, x, gates)
        return distill_loss(tea, stu, manifest.distill, proj).item()


def smoothed(values: list[float], frac: float = 0.1) -> tuple[float, float]:
    """Mean of the first and last ``frac`` windows."""
    w = max(1, int(len(values) * frac))
    return float(np.mean(values[:w])), float(np.mean(values[-w:]))


# ---------------------------------------------------------------------------
# full run with a run directory
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path | None
    manifest: RunManifest
    stage1: TrainState
    final: TrainState


def run_two_stage(
    manifest: RunManifest,
    teacher: ToySSLModel,
    corpus: Corpus,
    run_root: str | os.PathLike | None = None,
) -> RunResult:
    """Stage 1, finalization and stage 2; with ``run_root`` writes
    ``<run_root>/<hash>/{manifest.json, metrics.jsonl, ckpt_stage1, ckpt_final, reports/}``."""
    teacher_sum = params_checksum(teacher)
    run_dir = None
    metrics = None
    if run_root is not None:
        run_dir = Path(run_root) / manifest.content_hash()
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "reports").mkdir(exist_ok=True)
        store.dump_json(manifest.to_json(), run_dir / "manifest.json")
        metrics = run_dir / "metrics.jsonl"
        metrics.write_text("", encoding="utf-8")
    cache = TeacherCache(teacher, corpus.samples)
    s1 = run_stage1(manifest, teacher, corpus, metrics_path=metrics, run_dir=run_dir, cache=cache)
    if run_dir is not None:
        save_checkpoint(s1, run_dir / "ckpt_stage1", manifest)
    final = run_stage2(manifest, teacher, corpus, s1, metrics_path=metrics, run_dir=run_dir, cache=cache)
    if run_dir is not None:
        save_checkpoint(final, run_dir / "ckpt_final", manifest)
        store.dump_json(final.report, run_dir / "reports" / "pruning.json")
    if params_checksum(teacher) != teacher_sum:
        raise RuntimeError("teacher parameters changed during distillation")
    return RunResult(run_dir, manifest, s1, final)
