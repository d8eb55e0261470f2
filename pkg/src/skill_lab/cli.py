"""Command-line entry point: ``skill-lab <command> [options]``.

Flags override the values of ``--config``; the defaults shown by ``--help``
are those of the loaded config (built-in defaults without one).

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O failure. Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, store
from .clustering import agglomerate, cluster_report, read_assignment, write_assignment
from .config import ConfigError, ExperimentConfig, load_config
from .data import draw_calibration, generate_corpus, load_corpus
from .losses import MODES, DistillConfig, default_fixed_layers, distance_profile, gamma_weights, parse_gamma
from .model import ToySSLModel, load_model, params_checksum, pretrain_teacher, save_model
from .pipeline import DivergenceError, RunManifest, load_checkpoint, make_manifest, run_two_stage, smoothed
from .similarity import POOLING, read_similarity_csv, similarity_matrix, write_similarity_csv

RUN_ROOT_ENV = "SKILL_LAB_RUN_ROOT"
HELP_WIDTH = 88

log = logging.getLogger("skill_lab")


class HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Defaults in every flag's help, at a width independent of the terminal."""

    def __init__(self, prog):
        super().__init__(prog, width=HELP_WIDTH, max_help_position=30)

    def _get_help_string(self, action):
        if action.required or action.default in (None, [None]):
            return action.help  # the help text says what happens when omitted
        return super()._get_help_string(action)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _sub(subparsers, name: str, help_text: str) -> argparse.ArgumentParser:
    p = subparsers.add_parser(name, help=help_text, description=help_text, formatter_class=HelpFormatter)
    p.add_argument("--config", metavar="FILE", default=None, help="JSON experiment config; built-in defaults when omitted")
    return p


def build_parser(cfg: ExperimentConfig | None = None) -> argparse.ArgumentParser:
    cfg = cfg or ExperimentConfig()
    run_root = os.environ.get(RUN_ROOT_ENV, "runs")
    parser = Parser(
        prog="skill-lab",
        description="Layer-similarity-aware distillation and structured pruning on a toy SSL model.",
        formatter_class=HelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    p = _sub(sub, "gen-data", "generate the synthetic corpus")
    c = cfg.corpus
    p.add_argument("--out", required=True, metavar="DIR", help="corpus directory")
    p.add_argument("--num-samples", type=int, default=c.num_samples, help="number of sequences")
    p.add_argument("--seq-len", type=int, default=c.seq_len, help="frames per sequence")
    p.add_argument("--input-dim", type=int, default=c.input_dim, help="channels per frame")
    p.add_argument("--family", default=c.family, choices=("sinusoid-mixture", "piecewise-tones", "gaussian-ar"), help="signal family")
    p.add_argument("--noise-std", type=float, default=c.noise_std, help="additive noise std")
    p.add_argument("--seed", type=int, default=c.seed, help="corpus seed")

    p = _sub(sub, "train-teacher", "pretrain the toy teacher with masked reconstruction")
    m, t = cfg.model, cfg.teacher
    p.add_argument("--corpus", required=True, metavar="DIR", help="corpus directory")
    p.add_argument("--out", required=True, metavar="DIR", help="teacher checkpoint directory")
    p.add_argument("--num-layers", type=int, default=m.num_layers, help="transformer layers L")
    p.add_argument("--embed-dim", type=int, default=m.embed_dim, help="model width d")
    p.add_argument("--num-heads", type=int, default=m.num_heads, help="attention heads per layer")
    p.add_argument("--ffn-dim", type=int, default=m.ffn_dim, help="FFN units per layer")
    p.add_argument("--model-seed", type=int, default=m.seed, help="initialization seed")
    p.add_argument("--steps", type=int, default=t.steps, help="pretraining steps")
    p.add_argument("--batch-size", type=int, default=t.batch_size, help="sequences per step")
    p.add_argument("--lr", type=float, default=t.lr, help="peak learning rate")
    p.add_argument("--seed", type=int, default=t.seed, help="batch and mask seed")

    p = _sub(sub, "similarity", "CKA similarity between all teacher layers (CSV)")
    cal = cfg.calibration
    p.add_argument("--teacher", required=True, metavar="DIR", help="teacher checkpoint directory")
    p.add_argument("--corpus", required=True, metavar="DIR", help="corpus directory")
    p.add_argument("--out", required=True, metavar="CSV", help="output CSV")
    _calibration_flags(p, cal)

    p = _sub(sub, "cluster", "agglomerative clustering of layers (JSON)")
    p.add_argument("--similarity", required=True, metavar="CSV", help="similarity CSV")
    p.add_argument("--out", required=True, metavar="JSON", help="cluster assignment JSON")
    p.add_argument("--M", type=int, default=cfg.clustering.M, help="number of clusters")
    p.add_argument("--contiguous", action=argparse.BooleanOptionalAction, default=cfg.clustering.contiguous, help="only merge depth-adjacent clusters")
    p.add_argument("--report", metavar="JSON", default=None, help="also write within/between similarity summary; skipped when omitted")

    p = _sub(sub, "distill", "two-stage distillation and pruning; every combination of list flags is one run")
    d, pr, s1, s2 = cfg.distill, cfg.pruning, cfg.stage1, cfg.stage2
    p.add_argument("--teacher", required=True, metavar="DIR", help="teacher checkpoint directory")
    p.add_argument("--corpus", required=True, metavar="DIR", help="corpus directory")
    p.add_argument("--run-root", default=run_root, metavar="DIR", help=f"parent of run directories (env {RUN_ROOT_ENV})")
    p.add_argument("--mode", default=d.mode, choices=MODES, help="distillation objective")
    p.add_argument("--clusters", metavar="JSON", default=None, help="cluster assignment; computed from the teacher when omitted")
    p.add_argument("--M", type=int, nargs="+", default=[cfg.clustering.M], help="cluster counts (skill modes, without --clusters)")
    p.add_argument("--contiguous", action=argparse.BooleanOptionalAction, default=cfg.clustering.contiguous, help="depth-contiguous clusters")
    p.add_argument("--layers", type=int, nargs="+", default=d.layers, help="fixed-layer set S; {0, L/3, 2L/3, L} when omitted")
    p.add_argument("--gamma", nargs="+", default=[d.gamma], help="weight per S layer, e.g. 1/13; rest spread over other layers; uniform over S when omitted")
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=d.normalize, help="divide the cluster loss by M")
    p.add_argument("--target", type=float, nargs="+", default=[pr.target], help="target sparsities")
    p.add_argument("--ramp-steps", type=int, default=pr.ramp_steps, help="steps of the linear target ramp")
    p.add_argument("--stage1-steps", type=int, default=s1.steps, help="stage-1 steps")
    p.add_argument("--stage1-warmup", type=int, default=s1.warmup_steps, help="stage-1 warmup steps")
    p.add_argument("--stage2-steps", type=int, default=s2.steps, help="stage-2 steps")
    p.add_argument("--stage2-warmup", type=int, default=s2.warmup_steps, help="stage-2 warmup steps")
    p.add_argument("--lr-main", type=float, default=s1.lr_main, help="stage-1 peak lr of student and projections")
    p.add_argument("--lr-aux", type=float, default=s1.lr_aux, help="lr of gates and multipliers")
    p.add_argument("--stage2-lr", type=float, default=s2.lr_main, help="stage-2 peak lr")
    p.add_argument("--batch", type=int, default=s1.batch_sequences, help="sequences per step")
    p.add_argument("--seed", type=int, default=s1.seed, help="batch, gate-noise and projection seed")
    p.add_argument("--sweep-out", metavar="JSONL", default=None, help="one summary record per run; RUN_ROOT/sweep.jsonl when omitted")
    _calibration_flags(p, cal)

    p = _sub(sub, "analyze", "per-layer distance profile and pruning report of a finished run")
    a = cfg.analysis
    p.add_argument("run_dir", metavar="RUN_DIR", help="run directory written by distill")
    p.add_argument("--teacher", required=True, metavar="DIR", help="teacher checkpoint directory")
    p.add_argument("--corpus", required=True, metavar="DIR", help="corpus directory")
    p.add_argument("--samples", type=int, default=a.size, help="sequences averaged over")
    p.add_argument("--seed", type=int, default=a.seed, help="subset seed")

    p = _sub(sub, "report", "Markdown comparison table over run directories")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR", help="run directories")
    p.add_argument("--out", default="-", metavar="FILE", help="output file, - for stdout")
    return parser


def _calibration_flags(p, cal) -> None:
    p.add_argument("--calibration-size", type=int, default=cal.size, help="calibration sequences N")
    p.add_argument("--calibration-seed", type=int, default=cal.seed, help="calibration subset seed")
    p.add_argument("--pooling", default=cal.pooling, choices=POOLING, help="activation rows per sample")
    p.add_argument("--frames-per-sample", type=int, default=cal.frames_per_sample, help="frames kept with --pooling frames")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: ExperimentConfig) -> None:
    spec = dataclasses.replace(
        cfg.corpus,
        num_samples=args.num_samples,
        seq_len=args.seq_len,
        input_dim=args.input_dim,
        family=args.family,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    corpus = generate_corpus(spec, args.out)
    print(f"{args.out} sha256:{corpus.checksum}")


def cmd_train_teacher(args, cfg: ExperimentConfig) -> None:
    corpus = load_corpus(args.corpus)
    mc = dataclasses.replace(
        cfg.model,
        num_layers=args.num_layers,
        embed_dim=args.embed_dim,
        num_heads=args.num_heads,
        ffn_dim=args.ffn_dim,
        input_dim=corpus.spec.input_dim,
        seed=args.model_seed,
    )
    result = pretrain_teacher(ToySSLModel(mc), corpus, args.steps, args.batch_size, args.lr, None, cfg.teacher.mask_fraction, args.seed)
    start, end = smoothed(result.losses)
    save_model(result.model, args.out)
    print(json.dumps({"teacher": str(args.out), "loss_start": start, "loss_end": end}))


def _calibration(args, corpus):
    return draw_calibration(corpus, args.calibration_size, args.calibration_seed)


def cmd_similarity(args, cfg: ExperimentConfig) -> None:
    teacher, corpus = load_model(args.teacher), load_corpus(args.corpus)
    sim = similarity_matrix(teacher, _calibration(args, corpus), args.pooling, args.frames_per_sample)
    write_similarity_csv(sim, args.out)
    print(args.out)


def cmd_cluster(args, cfg: ExperimentConfig) -> None:
    sim = read_similarity_csv(args.similarity)
    assignment = agglomerate(sim, args.M, contiguous=args.contiguous)
    write_assignment(assignment, args.out)
    if args.report:
        store.dump_json(cluster_report(assignment, sim), args.report)
    print(json.dumps(assignment.clusters))


def _distill_configs(args, teacher: ToySSLModel, corpus):
    """(label, DistillConfig) for every requested objective."""
    n_states = teacher.config.num_layers + 1
    if args.mode == "fixed_layers":
        selected = args.layers or default_fixed_layers(teacher.config.num_layers)
        for g in args.gamma:
            if g is None:
                layers, weights = sorted(selected), [1.0 / len(selected)] * len(selected)
            else:
                layers, weights = gamma_weights(selected, parse_gamma(g), n_states)
            yield {"mode": args.mode, "M": None, "gamma": g}, DistillConfig(args.mode, layers, weights, normalize=args.normalize)
        return
    if args.clusters:
        a = read_assignment(args.clusters)
        yield {"mode": args.mode, "M": a.M, "gamma": None}, DistillConfig(args.mode, assignment=a, normalize=args.normalize)
        return
    sim = similarity_matrix(teacher, _calibration(args, corpus), args.pooling, args.frames_per_sample)
    for M in args.M:
        a = agglomerate(sim, M, contiguous=args.contiguous)
        yield {"mode": args.mode, "M": M, "gamma": None}, DistillConfig(args.mode, assignment=a, normalize=args.normalize)


def cmd_distill(args, cfg: ExperimentConfig) -> None:
    teacher, corpus = load_model(args.teacher), load_corpus(args.corpus)
    s1 = dataclasses.replace(
        cfg.stage1,
        steps=args.stage1_steps,
        warmup_steps=args.stage1_warmup,
        lr_main=args.lr_main,
        lr_aux=args.lr_aux,
        batch_sequences=args.batch,
        seed=args.seed,
    )
    s2 = dataclasses.replace(
        cfg.stage2, steps=args.stage2_steps, warmup_steps=args.stage2_warmup, lr_main=args.stage2_lr, lr_aux=0.0, batch_sequences=args.batch, seed=args.seed
    )
    for target in args.target:
        dataclasses.replace(cfg.pruning, target=target, ramp_steps=args.ramp_steps).validate()
    run_root = Path(args.run_root)
    records = []
    for (label, dc), target in itertools.product(list(_distill_configs(args, teacher, corpus)), args.target):
        pc = dataclasses.replace(cfg.pruning, target=target, ramp_steps=args.ramp_steps)
        manifest = make_manifest(teacher, corpus, dc, pc, s1, s2)
        result = run_two_stage(manifest, teacher, corpus, run_root)
        rep = result.final.report
        _, final_loss = smoothed([r["loss_distill"] for r in result.final.metrics])
        record = {
            "run": manifest.content_hash(),
            **label,
            "target": target,
            "expected_sparsity": rep["expected_sparsity"],
            "structural_sparsity": rep["structural_sparsity"],
            "whole_model_sparsity": rep["whole_model_sparsity"],
            "params_after": rep["params_after"],
            "final_loss": final_loss,
        }
        store.dump_json(record, result.run_dir / "reports" / "summary.json")
        records.append(record)
        print(result.run_dir)
    sweep = Path(args.sweep_out) if args.sweep_out else run_root / "sweep.jsonl"
    sweep.parent.mkdir(parents=True, exist_ok=True)
    sweep.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def _check_refs(manifest: RunManifest, teacher, corpus) -> None:
    if manifest.teacher_ref != "sha256:" + params_checksum(teacher):
        raise ConfigError("teacher checkpoint does not match the run manifest")
    if manifest.corpus_ref != "sha256:" + corpus.checksum:
        raise ConfigError("corpus does not match the run manifest")


def cmd_analyze(args, cfg: ExperimentConfig) -> None:
    run_dir = Path(args.run_dir)
    state, manifest = load_checkpoint(run_dir / "ckpt_final")
    teacher, corpus = load_model(args.teacher), load_corpus(args.corpus)
    _check_refs(manifest, teacher, corpus)
    subset = draw_calibration(corpus, min(args.samples, len(corpus)), args.seed)
    profile = distance_profile(teacher, state.student, subset)
    reports = run_dir / "reports"
    reports.mkdir(exist_ok=True)
    profile.write_csv(reports / "distance_profile.csv")
    store.dump_json(state.report, reports / "pruning.json")
    print(reports / "distance_profile.csv")


def _fmt(v, spec=".4f"):
    if v is None:
        return "-"
    return format(v, spec) if isinstance(v, float) else str(v)


def cmd_report(args, cfg: ExperimentConfig) -> None:
    header = ["run", "mode", "M", "gamma", "target", "s(alpha)", "structural", "whole model", "params", "final loss", "cos var"]
    rows = []
    for rd in map(Path, args.run_dirs):
        summary = json.loads((rd / "reports" / "summary.json").read_text(encoding="utf-8"))
        profile = rd / "reports" / "distance_profile.csv"
        cos_var = None
        if profile.exists():
            cos_var = float(np.loadtxt(profile, delimiter=",", skiprows=1, ndmin=2)[:, 2].var())
        rows.append(
            [
                summary["run"],
                summary["mode"],
                _fmt(summary["M"]),
                _fmt(summary["gamma"]),
                _fmt(summary["target"], ".2f"),
                _fmt(summary["expected_sparsity"]),
                _fmt(summary["structural_sparsity"]),
                _fmt(summary["whole_model_sparsity"]),
                _fmt(summary["params_after"]),
                _fmt(summary["final_loss"], ".5f"),
                _fmt(cos_var, ".3e"),
            ]
        )
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "similarity": cmd_similarity,
    "cluster": cmd_cluster,
    "distill": cmd_distill,
    "analyze": cmd_analyze,
    "report": cmd_report,
}

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4


def _fail(kind: str, code: int, exc: BaseException) -> int:
    message = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(json.dumps({"error": kind, "exit": code, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config", default=None)
        known, _ = pre.parse_known_args(argv)
        cfg = load_config(known.config)
        args = build_parser(cfg).parse_args(argv)
        COMMANDS[args.command](args, cfg)
    except DivergenceError as exc:
        return _fail("divergence", EXIT_DIVERGED, exc)
    except OSError as exc:
        return _fail("io", EXIT_IO, exc)
    except (ValueError, KeyError) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
