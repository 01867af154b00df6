"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL ...`` line; the lines are
also collected and repeated in the terminal summary.

The desk-scale pipeline (criteria 7 and 8) runs the real CLI into a temporary
directory. Set ``MASKDISTILL_DESK_DIR`` to an existing directory to keep the
artifacts; completed stages found there are reused.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from maskdistill.cli import main as cli
from maskdistill.config import strip_wallclock
from maskdistill.diffusion import NoiseSchedule, ancestral_sample, corrupt, make_rng, posterior_probs
from maskdistill.distill import normalize_rewards
from maskdistill.models import DenoiserModel, ModelConfig
from maskdistill.oracle import (corruption_matrix, disc_state_probabilities, enumerate_states,
                                exact_corrupted_marginal, exact_generator_marginal,
                                exact_optimal_discriminator, exact_student_gradient, fit_discriminator,
                                log_odds_of, mc_policy_gradient, state_index, tabular_pair)
from maskdistill.rgas import SamplerConfig, rgas_sample

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (0, 1, 2, 3, 4)


def report(request, n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    request.config.stash[ACCEPTANCE].append(line)


# ---------------------------------------------------------------- criterion 1

def _op_instances():
    from test_tensor import OPS, check_op
    return OPS, check_op


def test_criterion_01_autodiff(request):
    ops, check_op = _op_instances()
    t0 = time.time()
    worst = {}
    for name in ops:
        worst[name] = max(check_op(name, 1000 + s) for s in range(100))
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 60
    report(request, 1, ok, f"{len(ops)} ops x 100 instances, max rel err {max(worst.values()):.2e}, "
                           f"{elapsed:.1f}s" + (f", failing {bad}" if bad else ""))
    assert ok


# ---------------------------------------------------------------- criterion 2

def test_criterion_02_forward_process(request):
    t0 = time.time()
    sch = NoiseSchedule()
    k, length, m = 3, 2, 2
    states = enumerate_states(k, length)
    worst = 0.0
    for s, t in [(0.0, 0.3), (0.1, 0.5), (0.3, 0.9), (0.5, 1.0), (0.05, 0.06)]:
        Qt = corruption_matrix(k, length, float(sch.alpha(t)))
        Qs = corruption_matrix(k, length, float(sch.alpha(s)))
        for i, x in enumerate(states):
            if m in x:
                continue
            pred = np.broadcast_to(np.eye(k)[x], (len(states), length, k))
            post = posterior_probs(states, pred, s, t, sch, m)
            step = np.prod([post[:, l, states[:, l]] for l in range(length)], axis=0)
            worst = max(worst, float(np.abs(Qt[i] @ step - Qs[i]).max()))
    # Monte Carlo: corrupt every clean state 10^5 times at alpha = 0.7
    lin = NoiseSchedule("linear")
    Q = corruption_matrix(k, length, 0.7)
    n = 10 ** 5
    mc_ok = True
    rng = make_rng(2)
    for i, x in enumerate(states):
        if m in x:
            continue
        z = corrupt(np.tile(x, (n, 1)), 0.3, lin, rng, m)
        freq = np.bincount(state_index(z, k), minlength=len(states)) / n
        p = Q[i]
        mc_ok &= bool(np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-15))
    elapsed = time.time() - t0
    ok = worst < 1e-12 and mc_ok and elapsed < 60
    report(request, 2, ok, f"composition max err {worst:.1e}, MC within 3 sigma: {mc_ok}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 3

def test_criterion_03_optimal_discriminator(request):
    from maskdistill.models import DiscriminatorConfig, DiscriminatorModel

    t0 = time.time()
    sch = NoiseSchedule()
    student, teacher = tabular_pair(0)
    t = 0.5
    q_s = exact_corrupted_marginal(exact_generator_marginal(student, 2, sch), t, sch, 3, 2)
    q_t = exact_corrupted_marginal(exact_generator_marginal(teacher, 2, sch), t, sch, 3, 2)
    disc = DiscriminatorModel(DiscriminatorConfig(3, 2, d_model=16, n_layers=1, n_heads=2), seed=0)
    fit_discriminator(disc, q_s, q_t, t, seed=0)
    d_star = exact_optimal_discriminator(q_s, q_t)
    dev = float(np.nanmax(np.abs(disc_state_probabilities(disc, t) - d_star)))
    swapped = exact_optimal_discriminator(q_t, q_s)
    anti = float(np.nanmax(np.abs(log_odds_of(d_star) + log_odds_of(swapped))))
    elapsed = time.time() - t0
    ok = dev < 0.05 and anti < 1e-12 and elapsed < 600
    report(request, 3, ok, f"max |D - D*| {dev:.4f}, antisymmetry {anti:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 4

def test_criterion_04_policy_gradient(request):
    t0 = time.time()
    sch = NoiseSchedule()
    student, teacher = tabular_pair(0)
    exact = exact_student_gradient(student, teacher, sch, 2)["table"]
    mc = mc_policy_gradient(student, teacher, sch, 2, 10 ** 5, seed=1)["table"]
    big = np.abs(exact) > 1e-3
    rel = float((np.abs(mc - exact)[big] / np.abs(exact)[big]).max())
    same = exact_student_gradient(student, student.clone(), sch, 2)["table"]
    norm_same = float(np.linalg.norm(same))
    elapsed = time.time() - t0
    ok = rel < 0.05 and norm_same < 1e-8 and elapsed < 900
    report(request, 4, ok, f"{int(big.sum())} coords, max rel err {rel:.4f}, |grad| at teacher "
                           f"{norm_same:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- criterion 5

def test_criterion_05_group_normalization(request):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_mean, worst_shift, const_ok = 0.0, 0.0, True
    for _ in range(200):
        g = int(rng.integers(2, 64))
        r = rng.normal(rng.normal(0, 100), rng.uniform(1e-3, 10), g)
        z = normalize_rewards(r)[0]
        worst_mean = max(worst_mean, abs(z.mean()))
        c = float(rng.choice([-1.0, 1.0]) * 2.0 ** int(rng.integers(-4, 8)))
        # shifts by powers of two on dyadic rewards are exact in floating point
        rd = np.round(r * 64) / 64
        worst_shift = max(worst_shift, float(np.abs(normalize_rewards(rd)[0] - normalize_rewards(rd + c)[0]).max()))
        const_ok &= bool(np.all(normalize_rewards(np.full(g, rng.normal(0, 1e3)))[0] == 0.0))
    elapsed = time.time() - t0
    ok = worst_mean < 1e-9 and worst_shift == 0.0 and const_ok and elapsed < 1
    report(request, 5, ok, f"max |mean| {worst_mean:.1e}, shift diff {worst_shift:.1e}, "
                           f"constant->zero {const_ok}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- criterion 6

def test_criterion_06_rgas_reduction(request):
    from maskdistill.models import DiscriminatorConfig, DiscriminatorModel

    t0 = time.time()
    cfg = ModelConfig(12, 16, d_model=16, n_layers=1, n_heads=2, init_std=0.5)
    student = DenoiserModel(cfg, seed=0)
    disc = DiscriminatorModel(DiscriminatorConfig(12, 16, d_model=16, n_layers=1, n_heads=2), seed=1)
    disc.params["head.1.w"].data = np.random.default_rng(0).normal(0, 1, (16, 1))
    sampler = SamplerConfig(nfe=8, h_max=0.0, candidates=1)
    same = 0
    for seed in range(100):
        a = rgas_sample(student, disc, sampler, NoiseSchedule(), make_rng(seed), 4)
        b = ancestral_sample(student.denoise, 4, 16, 8, NoiseSchedule(), make_rng(seed), 11)
        same += int(np.array_equal(a, b))
    elapsed = time.time() - t0
    ok = same == 100 and elapsed < 60
    report(request, 6, ok, f"{same}/100 seeds bitwise identical, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------- criteria 7, 8

def _jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    keep = os.environ.get("MASKDISTILL_DESK_DIR")
    out = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    out.mkdir(parents=True, exist_ok=True)
    corpus = str(ROOT / "data" / "desk_corpus.txt")
    conf = str(ROOT / "configs" / "desk.conf")
    t0 = time.time()

    def run(marker: Path, argv: list[str]):
        if not marker.exists():
            assert cli(argv) == 0

    run(out / "teacher.npz", ["--seed", "0", "--config", conf, "pretrain-teacher", "--corpus", corpus,
                              "--out", str(out / "teacher.npz")])
    run(out / "evaluator.npz", ["--seed", "100", "--config", str(ROOT / "configs" / "desk_evaluator.conf"),
                                "pretrain-teacher", "--corpus", corpus, "--out", str(out / "evaluator.npz")])
    for seed in SEEDS:
        d = out / f"seed{seed}"
        run(d / "disc.npz", ["--seed", str(seed), "--config", conf, "distill",
                             "--teacher", str(out / "teacher.npz"), "--teacher-pool", str(out / "teacher_pool.npy"),
                             "--out", str(d)])
        run(d / "eval" / "manifest.json",
            ["--seed", str(seed), "--config", conf, "eval", "--student", str(d / "student.npz"),
             "--disc", str(d / "disc.npz"), "--teacher", str(out / "teacher.npz"),
             "--evaluator", str(out / "evaluator.npz"), "--out", str(d / "eval")])
    elapsed = time.time() - t0
    timing = out / "timing.json"
    if not timing.exists():
        timing.write_text(json.dumps({"seconds": elapsed}))
    return out, json.loads(timing.read_text())["seconds"]


def _cell(records, model, mode, nfe, key="ppl"):
    for r in records:
        if r["model"] == model and r["mode"] == mode and r["nfe"] == nfe:
            return r[key]
    raise KeyError((model, mode, nfe))


@pytest.mark.slow
def test_criterion_07_desk_distillation(request, desk_run):
    out, seconds = desk_run
    wins = {"a_nfe4": 0, "a_nfe8": 0, "b_rgas8": 0, "c_entropy": 0}
    lines = []
    for seed in SEEDS:
        rec = _jsonl(out / f"seed{seed}" / "eval" / "metrics.jsonl")
        t_max = max(r["nfe"] for r in rec if r["model"] == "teacher")
        h_teacher = _cell(rec, "teacher", "as", t_max, "entropy")
        a4 = _cell(rec, "student", "as", 4) < _cell(rec, "teacher", "as", 4)
        a8 = _cell(rec, "student", "as", 8) < _cell(rec, "teacher", "as", 8)
        b8 = _cell(rec, "student", "rgas", 8) <= _cell(rec, "student", "as", 8)
        ent = [_cell(rec, "student", "as", n, "entropy") for n in (8, 16, 32)]
        c = all(abs(h - h_teacher) <= 0.1 * h_teacher for h in ent)
        wins["a_nfe4"] += a4
        wins["a_nfe8"] += a8
        wins["b_rgas8"] += b8
        wins["c_entropy"] += c
        lines.append(
            f"seed {seed}: ppl@4 {_cell(rec, 'student', 'as', 4):.2f} vs {_cell(rec, 'teacher', 'as', 4):.2f}, "
            f"ppl@8 {_cell(rec, 'student', 'as', 8):.2f} vs {_cell(rec, 'teacher', 'as', 8):.2f}, "
            f"rgas@8 {_cell(rec, 'student', 'rgas', 8):.2f}, entropy {min(ent):.3f}-{max(ent):.3f} "
            f"vs {h_teacher:.3f}")
    for line in lines:
        print("  " + line)
    ok = all(v >= 4 for v in wins.values()) and seconds < 2 * 3600
    report(request, 7, ok, f"wins out of 5 {wins}, pipeline {seconds / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_08_teacher_sanity(request, desk_run):
    out, _ = desk_run
    rec = [r for r in _jsonl(out / "teacher.metrics.jsonl") if r.get("val_nelbo") is not None]
    first, last = rec[0]["val_nelbo"], rec[-1]["val_nelbo"]
    drop = 1 - last / first
    steps = rec[-1]["step"]
    ok = rec[0]["step"] == 0 and steps >= 5000 and last < first and drop >= 0.3
    report(request, 8, ok, f"val NELBO/token {first:.3f} -> {last:.3f} ({100 * drop:.1f}% drop) "
                           f"over {steps} steps")
    assert ok


# ---------------------------------------------------------------- criterion 9

def test_criterion_09_model_constraints(request):
    t0 = time.time()
    rng = np.random.default_rng(0)
    n_inputs, fails = 0, []
    for seed in range(20):
        k = int(rng.integers(3, 12))
        length = int(rng.integers(1, 12))
        cfg = ModelConfig(k, length, d_model=8, n_layers=1, n_heads=2, init_std=float(rng.uniform(0.05, 2)))
        model = DenoiserModel(cfg, seed=seed)
        z = rng.integers(0, k - 1, (500, length))
        z = np.where(rng.random(z.shape) < rng.uniform(0, 1, (500, 1)), k - 1, z)
        p = model.denoise(z, rng.random(500))
        n_inputs += len(z)
        if np.abs(p.sum(-1) - 1).max() > 1e-9:
            fails.append("simplex")
        if np.any(p[..., k - 1] != 0):
            fails.append("mask mass")
        carry = z != k - 1
        if not np.array_equal(p[carry], np.eye(k)[z[carry]]):
            fails.append("carry-over")
    elapsed = time.time() - t0
    ok = not fails and n_inputs >= 10 ** 4 and elapsed < 60
    report(request, 9, ok, f"{n_inputs} inputs, violations {fails or 'none'}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------- criterion 10

TINY = """
length = 8
[model]
d_model = 8
n_layers = 1
n_heads = 2
[teacher]
steps = 8
warmup = 2
batch_size = 4
eval_interval = 4
val_size = 8
val_grid = 4
[distill]
group_size = 4
iterations = 3
teacher_pool = 8
teacher_steps = 4
rollout_steps = 2
disc_warmup = 2
[sampler]
candidates = 2
[eval]
nfe_list = 2, 4
teacher_nfe = 4
num_samples = 4
score_grid = 4
"""


def test_criterion_10_reproducibility(request, tmp_path):
    from maskdistill.corpus import synthetic_text

    t0 = time.time()
    (tmp_path / "corpus.txt").write_text(synthetic_text(40, seed=5))
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY)
    a = tmp_path / "a"
    c = ["--seed", "3", "--config", str(conf)]
    cli(c + ["pretrain-teacher", "--corpus", str(tmp_path / "corpus.txt"), "--out", str(a / "teacher.npz")])
    cli(c + ["distill", "--teacher", str(a / "teacher.npz"), "--out", str(a / "distill")])
    cli(c + ["eval", "--student", str(a / "distill/student.npz"), "--disc", str(a / "distill/disc.npz"),
             "--teacher", str(a / "teacher.npz"), "--evaluator", str(a / "teacher.npz"),
             "--out", str(a / "eval")])
    cli(c + ["sample", "--student", str(a / "distill/student.npz"), "--disc", str(a / "distill/disc.npz"),
             "--mode", "rgas", "--nfe", "4", "--out", str(a / "samples.txt")])
    cli(c + ["oracle-check", "--case", "ikl", "--out", str(a / "oracle")])

    runs = {
        "pretrain-teacher": (a / "teacher.manifest.json", "teacher.npz", lambda d: d / "teacher.metrics.jsonl"),
        "distill": (a / "distill/manifest.json", "distill", lambda d: d / "metrics.jsonl"),
        "eval": (a / "eval/manifest.json", "eval", lambda d: d / "metrics.jsonl"),
        "oracle-check": (a / "oracle/manifest.json", "oracle", lambda d: d / "metrics.jsonl"),
    }
    same = {}
    for name, (manifest, _, metrics) in runs.items():
        b = tmp_path / f"re_{name}"
        target = b / "teacher.npz" if name == "pretrain-teacher" else b
        cli(["rerun", str(manifest), "--out", str(target)])
        orig_dir = manifest.parent
        orig = _jsonl(metrics(orig_dir))
        new = _jsonl(metrics(b))
        same[name] = strip_wallclock(orig) == strip_wallclock(new) and len(orig) > 0
    b = tmp_path / "re_sample" / "samples.txt"
    cli(["rerun", str(a / "samples.manifest.json"), "--out", str(b)])
    same["sample"] = b.read_bytes() == (a / "samples.txt").read_bytes()
    elapsed = time.time() - t0
    ok = all(same.values())
    report(request, 10, ok, f"bitwise rerun per command {same}, {elapsed:.1f}s")
    assert ok
