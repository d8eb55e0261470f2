"""End-to-end acceptance checks, one test per criterion."""

import time

import numpy as np
import pytest

from skill_lab import autodiff as ad
from skill_lab.autodiff import Tensor, gradcheck
from skill_lab.clustering import ClusterAssignment, agglomerate
from skill_lab.data import CorpusSpec, build_corpus, draw_calibration
from skill_lab.losses import (
    DistillConfig,
    default_fixed_layers,
    distance_profile,
    distill_loss,
    fixed_layer_loss,
    init_projections,
    pair_loss,
    skill_loss,
)
from skill_lab.model import ModelConfig, ToySSLModel, forward_with_states, pretrain_teacher
from skill_lab.pipeline import (
    PruningConfig,
    StageConfig,
    TeacherCache,
    finalize_state,
    load_checkpoint,
    make_manifest,
    run_stage1,
    run_stage2,
    run_two_stage,
    save_checkpoint,
)
from skill_lab.pruning import PruningGates, prob_nonzero, sample_gate, uniform_draw
from skill_lab.similarity import check_similarity, cka_features, gram, hsic, similarity_matrix
from test_autodiff import PRIMITIVES
from test_pruning import hc_closed_form

DESK_STAGE1 = StageConfig(3000, 900, 2e-4, 2e-2)
DESK_STAGE2 = StageConfig(1500, 300, 1e-4, 0.0)


@pytest.fixture(scope="module")
def corpus512():
    return build_corpus(CorpusSpec(num_samples=512, seq_len=64, input_dim=8, seed=0))


def make_teacher(corpus, num_layers):
    model = pretrain_teacher(ToySSLModel(ModelConfig(num_layers=num_layers)), corpus, steps=1500, lr=2e-3).model
    return model.requires_grad_(False)


@pytest.fixture(scope="module")
def teacher4(corpus512):
    return make_teacher(corpus512, 4)


@pytest.fixture(scope="module")
def teacher6(corpus512):
    return make_teacher(corpus512, 6)


@pytest.fixture(scope="module")
def sparsity_run(teacher4, corpus512):
    """Desk-default stage 1 (L=4, d=32, t=0.5, ramp 300) with fixed layers."""
    S = default_fixed_layers(4)
    dc = DistillConfig("fixed_layers", S, [1 / len(S)] * len(S))
    manifest = make_manifest(teacher4, corpus512, dc, PruningConfig(target=0.5, ramp_steps=300), DESK_STAGE1, DESK_STAGE2)
    start = time.perf_counter()
    state = run_stage1(manifest, teacher4, corpus512)
    final = finalize_state(state, manifest)
    return manifest, state, final, time.perf_counter() - start


# ---------------------------------------------------------------------------


def hsic_naive(k, l):
    n = k.shape[0]
    h = [[(1.0 if i == j else 0.0) - 1.0 / n for j in range(n)] for i in range(n)]

    def mm(a, b):
        return [[sum(a[i][m] * b[m][j] for m in range(n)) for j in range(n)] for i in range(n)]

    khlh = mm(mm(mm(k.tolist(), h), l.tolist()), h)
    return sum(khlh[i][i] for i in range(n)) / (n - 1) ** 2


def test_criterion_01_hsic_oracle(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    dims = (1, 4, 16)
    for p in range(100):
        x = rng.normal(size=(8, dims[p % 3]))
        y = rng.normal(size=(8, dims[(p // 3) % 3]))
        k, l = gram(x), gram(y)
        ref = hsic_naive(k, l)
        worst = max(worst, abs(hsic(k, l) - ref) / abs(ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 5.0
    criterion(1, "HSIC matches explicit-H loop", ok, f"max rel err {worst:.2e} (<=1e-10), {elapsed:.2f}s (<5s)")
    assert ok


def test_criterion_02_cka_invariances(criterion, teacher4, corpus512):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 16))
    base = cka_features(x, x)
    rot = 0.0
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
        rot = max(rot, abs(cka_features(x, x @ q) - base))
    scale = max(abs(cka_features(x, c * x) - 1.0) for c in (1e-3, 0.5, 2.0, 7.0, 1e3))
    sim = similarity_matrix(teacher4, draw_calibration(corpus512, 200, 0))
    try:
        check_similarity(sim, 1e-10)
        matrix_ok = True
    except ValueError:
        matrix_ok = False
    ok = rot < 1e-8 and scale <= 1e-10 and matrix_ok
    detail = f"orthogonal {rot:.1e} (<1e-8), scale {scale:.1e} (<=1e-10), trained-teacher matrix valid: {matrix_ok}"
    criterion(2, "CKA invariances", ok, detail)
    assert ok


def _loss_gradchecks(rng):
    model = ToySSLModel(ModelConfig(conv_layers=((6, 3, 2),), embed_dim=8, num_layers=3, num_heads=2, ffn_dim=6, input_dim=3, seed=5))
    x = rng.uniform(-1, 1, (10, 3))
    with ad.no_grad():
        tea = [s.data + rng.normal(0, 0.1, s.shape) for s in forward_with_states(model, x)]
    params = [model.params[k] for k in ("conv0.weight", "proj.weight", "layer2.attn.v.weight", "layer3.ffn.out.weight")]
    errors = {}
    t = rng.uniform(-1, 1, (6, 4))
    s = ad.parameter(rng.uniform(-1, 1, (6, 4)))
    w = ad.parameter(rng.uniform(-1, 1, (4, 4)))
    errors["pair_loss"] = gradcheck(lambda: pair_loss(t, s @ w), [s, w])
    assignment = ClusterAssignment(2, [[0, 3], [1, 2]])
    for mode in ("fixed_layers", "skill", "skill_no_avg", "skill_no_avg_student"):
        if mode == "fixed_layers":
            cfg = DistillConfig(mode, [0, 2, 3], [0.3, 0.3, 0.4])
        else:
            cfg = DistillConfig(mode, assignment=assignment)
        proj = init_projections(cfg, 8, 8, seed=3, noise=0.1)
        errors[mode] = gradcheck(lambda: distill_loss(tea, forward_with_states(model, x), cfg, proj), params + list(proj.values()))
    gates = PruningGates.for_model(model, init_mean=0.3, init_std=1.0, seed=4)
    errors["expected_sparsity"] = gradcheck(lambda: gates.expected_sparsity() * 10.0, gates.parameters())
    la = ad.parameter(rng.uniform(-1, 1, 16))
    u = rng.uniform(0.3, 0.7, 16)
    errors["sample_gate"] = gradcheck(lambda: (sample_gate(la, u) * np.arange(16.0)).sum(), [la])
    return errors


def test_criterion_03_gradient_suite(criterion):
    rng = np.random.default_rng(3)
    errors = {}
    for name, build in sorted(PRIMITIVES.items()):
        *inputs, fn = build(rng)
        errors[name] = gradcheck(fn, inputs)
    errors.update(_loss_gradchecks(rng))
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values())
    criterion(3, "finite-difference gradient suite", ok, f"{len(errors)} checks, worst {worst} {errors[worst]:.1e} (<1e-4)")
    assert ok, errors


def test_criterion_04_hard_concrete_statistics(criterion):
    worst = 0.0
    for k, la in enumerate((-2.0, 0.0, 2.0)):
        z = sample_gate(la, uniform_draw(100_000, seed=4, step=k)).data
        p0, p1, ez = hc_closed_form(la)
        worst = max(worst, abs((z == 0).mean() - p0), abs((z == 1).mean() - p1), abs(z.mean() - ez))
    p = prob_nonzero(0.0).item()
    target = 1.0 / (1.0 + np.exp(-1.5987))
    ok = worst <= 1e-2 and abs(p - target) <= 1e-3 and abs(p - 0.832) <= 1e-3
    criterion(4, "Hard Concrete statistics", ok, f"max MC deviation {worst:.1e} (<=1e-2), prob_nonzero(0)={p:.5f}")
    assert ok


def test_criterion_05_singleton_reduction(criterion):
    rng = np.random.default_rng(5)
    model = ToySSLModel(ModelConfig(seed=5))
    x = rng.normal(size=(2, 32, 8))
    with ad.no_grad():
        tea = [s.data for s in forward_with_states(model, x)]
        stu = [Tensor(s + rng.normal(0, 0.2, s.shape)) for s in tea]
    weights = [rng.normal(size=(32, 32)) for _ in tea]
    n = len(tea)
    a = skill_loss(tea, stu, DistillConfig("skill", assignment=ClusterAssignment.singletons(n)), {f"cluster{i}": Tensor(w) for i, w in enumerate(weights)}).item()
    b = fixed_layer_loss(tea, stu, DistillConfig("fixed_layers", list(range(n)), [1.0] * n), {f"layer{i}": Tensor(w) for i, w in enumerate(weights)}).item()
    diff = abs(a - b)
    ok = diff <= 1e-10
    criterion(5, "singleton clusters reduce to all-layer loss", ok, f"|diff| {diff:.1e} (<=1e-10)")
    assert ok


def test_criterion_06_sparsity_control(criterion, sparsity_run):
    _, state, final, elapsed = sparsity_run
    s_end = state.metrics[-1]["sparsity"]
    tail = state.metrics[int(0.8 * len(state.metrics)) :]
    tail_dev = max(abs(r["sparsity"] - r["target"]) for r in tail)
    structural = final.report["structural_sparsity"]
    ok = abs(s_end - 0.5) <= 0.02 and abs(structural - 0.5) <= 0.05 and tail_dev <= 0.05 and elapsed <= 900
    detail = f"s(alpha)={s_end:.4f}, structural {structural:.4f}, final-20% max dev {tail_dev:.4f}, {elapsed:.0f}s"
    criterion(6, "sparsity control", ok, detail)
    assert ok


def test_criterion_07_finalization_equivalence(criterion, sparsity_run):
    _, state, final, _ = sparsity_run
    gates = state.gates.deterministic()
    rng = np.random.default_rng(7)
    worst = 0.0
    with ad.no_grad():
        for _ in range(10):
            x = rng.normal(size=(int(rng.integers(16, 96)), 8))
            full = forward_with_states(state.student, x, gates)
            shrunk = forward_with_states(final.student, x)
            worst = max(worst, max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(full, shrunk)))
    ok = worst < 1e-10 and final.report["removed_groups"] > 0
    criterion(7, "finalization equivalence", ok, f"max abs diff {worst:.1e} (<1e-10), {final.report['removed_groups']} groups removed")
    assert ok


def test_criterion_08_distance_profile(criterion, teacher6, corpus512):
    L = teacher6.config.num_layers
    S = default_fixed_layers(L)
    sim = similarity_matrix(teacher6, draw_calibration(corpus512, 200, 0))
    configs = {
        "fixed": DistillConfig("fixed_layers", S, [1 / len(S)] * len(S)),
        # as many cluster targets as fixed layers
        "skill": DistillConfig("skill", assignment=agglomerate(sim, len(S))),
    }
    held = draw_calibration(corpus512, 200, 1)
    start = time.perf_counter()
    profiles = {}
    for name, dc in configs.items():
        manifest = make_manifest(teacher6, corpus512, dc, PruningConfig(target=0.5, ramp_steps=300), DESK_STAGE1, DESK_STAGE2)
        final = run_two_stage(manifest, teacher6, corpus512).final
        profiles[name] = distance_profile(teacher6, final.student, held).cosine
    elapsed = time.perf_counter() - start
    var_fixed, var_skill = profiles["fixed"].var(), profiles["skill"].var()
    non_s = [i for i in range(L + 1) if i not in S]
    on_s, off_s = profiles["fixed"][S].mean(), profiles["fixed"][non_s].mean()
    ok = var_skill < var_fixed and off_s > on_s and elapsed <= 1800
    detail = (
        f"cos var skill {var_skill:.2e} < fixed {var_fixed:.2e}; fixed non-S {off_s:.2e} > S {on_s:.2e}; "
        f"clusters {configs['skill'].assignment.clusters}; {elapsed:.0f}s"
    )
    criterion(8, "distance-profile comparison", ok, detail)
    assert ok


def test_criterion_09_clustering(criterion, teacher4, corpus512):
    rng = np.random.default_rng(9)
    x = rng.normal(size=(7, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sim = np.clip(x @ x.T, 0, 1)
    deterministic = all(agglomerate(sim, M) == agglomerate(sim, M) for M in range(1, 8))
    cal = draw_calibration(corpus512, 200, 0)
    first_merges = []
    for k in range(1, teacher4.config.num_layers + 1):
        dup = teacher4.copy()
        dup.params[f"layer{k}.attn.out.weight"].data[:] = 0.0
        dup.params[f"layer{k}.ffn.out.weight"].data[:] = 0.0
        first_merges.append(agglomerate(similarity_matrix(dup, cal), 4).merge_trace[0][:2] == (k - 1, k))
    n = 5
    edges = agglomerate(sim[:n, :n], n).clusters == [[i] for i in range(n)] and agglomerate(sim[:n, :n], 1).clusters == [list(range(n))]
    ok = deterministic and all(first_merges) and edges
    criterion(9, "clustering determinism and sanity", ok, f"deterministic {deterministic}, duplicated pair merged first {sum(first_merges)}/{len(first_merges)}, edge cases {edges}")
    assert ok


def test_criterion_10_reproducibility(criterion, teacher4, corpus512, tmp_path):
    sim = similarity_matrix(teacher4, draw_calibration(corpus512, 200, 0))
    dc = DistillConfig("skill", assignment=agglomerate(sim, 3))
    manifest = make_manifest(teacher4, corpus512, dc, PruningConfig(0.5, 50), StageConfig(200, 60, 2e-4, 2e-2), StageConfig(100, 20, 1e-4, 0.0))
    a = run_two_stage(manifest, teacher4, corpus512, tmp_path / "a").run_dir
    b = run_two_stage(manifest, teacher4, corpus512, tmp_path / "b").run_dir
    identical = (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()

    cache = TeacherCache(teacher4, corpus512.samples)
    full = run_stage1(manifest, teacher4, corpus512, cache=cache)
    half = run_stage1(manifest, teacher4, corpus512, stop_after=100, cache=cache)
    save_checkpoint(half, tmp_path / "mid", manifest)
    state, loaded = load_checkpoint(tmp_path / "mid")
    resumed = run_stage1(loaded, teacher4, corpus512, state=state, cache=cache)
    same_metrics = half.metrics == full.metrics[:100] and resumed.metrics[-100:] == full.metrics[100:]
    same_params = all(np.array_equal(full.student.params[k].data, resumed.student.params[k].data) for k in full.student.params)
    end_a = run_stage2(manifest, teacher4, corpus512, full, cache=cache)
    end_b = run_stage2(manifest, teacher4, corpus512, resumed, cache=cache)
    same_final = end_a.metrics == end_b.metrics
    ok = identical and same_metrics and same_params and same_final
    criterion(10, "reproducibility", ok, f"metrics JSONL identical {identical}, resume at 100/200 bit-exact {same_metrics and same_params and same_final}")
    assert ok
