"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Tolerances and runtime limits are pinned below. Run with ``pytest -v -s``
or read the "acceptance criteria" section of the terminal summary.
"""

import math
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

import desk as desk_module
from mtgen import diffnum as dn
from mtgen.cvae import EncoderOutput, kl_gaussian, sample_pipeline, smoothed
from mtgen.generator import GenerationConfig, export_suite, generate, min_pairwise_distance
from mtgen.harness import StubClassifier
from mtgen.metrics import GaussianStats, fid_report, frechet_distance, matrix_sqrt_psd
from mtgen.search import SwarmConfig, o1, o2, pso_run
from test_diffnum import GRAD_CASES

GRAD_TOL = 1e-4
CLOSED_FORM_RTOL = 1e-6
SPHERE_TOL = 1e-3
VAL_ACCURACY = 0.95
FIDELITY = 0.70
K = 0.5
TARGET = 50
NOISE_GRID = (0.05, 0.1, 0.2, 0.4)
LIMITS = {1: 30, 2: 5, 3: 10, 4: 15 * 60, 5: 60, 6: 20 * 60, 7: 120}
GEN_SEED = 0


def record(log, number, ok, detail, seconds=None):
    limit = LIMITS.get(number)
    timing = "" if seconds is None else f" [{seconds:.1f}s / limit {limit}s]"
    log.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}{timing}")
    assert ok, log[-1]


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def rel_close(a, b):
    return abs(a - b) <= CLOSED_FORM_RTOL * max(abs(b), 1e-300) or a == b


def test_criterion_1_gradients(acceptance_log):
    def check():
        worst = {}
        with dn.default_dtype(np.float64):
            for name in sorted(GRAD_CASES):
                *items, fn = GRAD_CASES[name](np.random.default_rng(zlib.crc32(name.encode())))
                tensors = [t for t in items if isinstance(t, dn.Tensor) and t.requires_grad]
                worst[name] = dn.gradcheck(fn, tensors)
            rng = np.random.default_rng(7)
            net = dn.MLP([5, 8, 6, 3], rng, hidden_activation="tanh")
            x = rng.normal(size=(4, 5))
            worst["mlp"] = dn.gradcheck(lambda: dn.cross_entropy(net(x), [0, 2, 1, 2]), net.parameters())
        return worst

    worst, seconds = timed(check)
    top = max(worst.values())
    ok = top < GRAD_TOL and seconds < LIMITS[1]
    record(acceptance_log, 1, ok, f"{len(worst)} layers, max rel err {top:.2e} < {GRAD_TOL:g}", seconds)


def _closed_forms():
    def kl(mu, logvar):
        with dn.default_dtype(np.float64):
            enc = EncoderOutput(dn.Tensor(np.array(mu, dtype=float)), dn.Tensor(np.array(logvar, dtype=float)))
            return kl_gaussian(enc).item()

    def softmax(row):
        with dn.default_dtype(np.float64):
            return dn.softmax(dn.Tensor(np.array([row], dtype=float))).data[0]

    def fd(mean_a, cov_a, mean_b, cov_b):
        a = GaussianStats(np.atleast_1d(np.array(mean_a, float)), np.atleast_2d(np.array(cov_a, float)), 100)
        b = GaussianStats(np.atleast_1d(np.array(mean_b, float)), np.atleast_2d(np.array(cov_b, float)), 100)
        return frechet_distance(a, b).value

    ln3 = math.log(3.0)
    scalars = [
        ("kl mu=0", kl([[0.0]], [[0.0]]), 0.0),
        ("kl mu=1", kl([[1.0]], [[0.0]]), 0.5),
        ("kl var=4", kl([[0.0]], [[math.log(4)]]), 0.5 * (4 - 1 - math.log(4))),
        ("o1(0)", o1(0.0), 0.0),
        ("o1(1)", o1(1.0), (math.e - 1) / (math.e + 1)),
        ("o1(4)", o1(4.0), (math.exp(4) - 1) / (math.exp(4) + 1)),
        ("o2(0)", o2(np.zeros(5)), 1.0),
        ("o2(1,1)", o2(np.array([1.0, 1.0])), math.exp(-1)),
        ("o2(3)", o2(np.array([3.0])), math.exp(-9)),
        ("fd equal", fd([0, 1], np.eye(2), [0, 1], np.eye(2)), 0.0),
        ("fd mean", fd(0, 1, 1, 1), 1.0),
        ("fd var", fd(0, 1, 0, 4), 1.0),
    ]
    vectors = [
        ("softmax equal", softmax([2.0] * 4), np.full(4, 0.25)),
        ("softmax ln3", softmax([0.0, ln3]), np.array([0.25, 0.75])),
        ("softmax shifted", softmax([1000.0, 1000.0 + ln3]), np.array([0.25, 0.75])),
        ("sqrt eye", matrix_sqrt_psd(np.eye(3)), np.eye(3)),
        ("sqrt diag", matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0])),
    ]
    bad = [name for name, got, want in scalars if not rel_close(got, want)]
    bad += [name for name, got, want in vectors
            if not np.allclose(got, want, rtol=CLOSED_FORM_RTOL, atol=1e-15)]
    return len(scalars) + len(vectors), bad


def test_criterion_2_closed_forms(acceptance_log):
    (count, bad), seconds = timed(_closed_forms)
    ok = not bad and seconds < LIMITS[2]
    detail = f"{count - len(bad)}/{count} analytic values within rel {CLOSED_FORM_RTOL:g}"
    record(acceptance_log, 2, ok, detail + (f" (failed: {', '.join(bad)})" if bad else ""), seconds)


def test_criterion_3_pso_sphere(acceptance_log):
    def run():
        cfg = SwarmConfig(particles=40, iterations=200)
        return [np.linalg.norm(pso_run(lambda p: -(p ** 2).sum(axis=1), 8, cfg, seed).best_position)
                for seed in range(10)]

    dists, seconds = timed(run)
    solved = sum(d < SPHERE_TOL for d in dists)
    ok = solved == 10 and seconds < LIMITS[3]
    record(acceptance_log, 3, ok, f"{solved}/10 seeds within {SPHERE_TOL:g} (worst {max(dists):.1e})", seconds)


def conditioning_fidelity(d):
    rng = np.random.default_rng(2)
    hits = []
    for c in range(d.train.num_classes):
        _, x = d.vae.sample_random(200, c, rng)
        hits.append(d.oracle.predict(x) == c)
    return float(np.mean(hits))


def test_criterion_4_desk_pipeline(desk, acceptance_log):
    start = time.perf_counter()
    acc = desk.mut_report.val_accuracy
    monotone = all(np.all(np.diff(smoothed(h.total, 5)) <= 0) for h in (desk.vae.history1_, desk.vae.history2_))
    fidelity = conditioning_fidelity(desk)
    seconds = sum(desk.seconds.values()) + time.perf_counter() - start
    ok = acc >= VAL_ACCURACY and monotone and fidelity >= FIDELITY and seconds < LIMITS[4]
    detail = (f"val acc {acc:.3f} >= {VAL_ACCURACY}, smoothed loss monotone={monotone}, "
              f"oracle fidelity {fidelity:.3f} >= {FIDELITY}")
    record(acceptance_log, 4, ok, detail, seconds)


def faithfulness_runs(d):
    swarm = SwarmConfig(particles=4, iterations=2)
    wrong = generate(StubClassifier("always-wrong", 5), d.stage1, d.stage2,
                     GenerationConfig(n_tests=20, k=0.0, max_attempts=20, passes=2, swarm=swarm))
    right = generate(StubClassifier("always-right", 5), d.stage1, d.stage2,
                     GenerationConfig(n_tests=5, max_attempts=50, passes=2, swarm=swarm))
    real = generate(d.mut, d.stage1, d.stage2, GenerationConfig(n_tests=20, k=K, seed=GEN_SEED))
    return {"wrong": wrong, "right": right, "real": real}


@pytest.fixture(scope="module")
def faithfulness(desk):
    return timed(lambda: faithfulness_runs(desk))


def test_criterion_5_algorithm_faithfulness(desk, faithfulness, acceptance_log):
    runs, seconds = faithfulness
    wrong_suite, wrong = runs["wrong"]
    right_suite, right = runs["right"]
    suite, report = runs["real"]
    spread = min(min_pairwise_distance([c.latent for c in suite.by_class(c)]) for c in range(5))
    reverify = bool(np.all(desk.mut.predict(suite.images()) != [c.expected for c in suite.cases]))
    checks = {
        "stub wrong N in N": len(wrong_suite) == wrong.attempts == 20,
        "stub right exhausted": len(right_suite) == 0 and right.exhausted,
        f"pairwise >= {K}": spread >= K,
        "re-verify": reverify and len(suite) == 20,
    }
    ok = all(checks.values()) and seconds < LIMITS[5]
    detail = ", ".join(f"{k}={'ok' if v else 'no'}" for k, v in checks.items()) + f" (min spread {spread:.2f})"
    record(acceptance_log, 5, ok, detail, seconds)


def tradeoff_runs(d):
    out = {}
    for mode in ("random", "search"):
        out[mode] = generate(d.mut, d.stage1, d.stage2, GenerationConfig(n_tests=TARGET, mode=mode, k=K,
                                                                        seed=GEN_SEED))
    return out


@pytest.fixture(scope="module")
def tradeoff(desk):
    return timed(lambda: tradeoff_runs(desk))


def test_criterion_6_tradeoff(tradeoff, acceptance_log):
    runs, seconds = tradeoff
    rnd, srch = runs["random"][1], runs["search"][1]
    reached = rnd.retained == srch.retained == TARGET and not rnd.exhausted and not srch.exhausted
    cand = {m: runs[m][1].attempts / max(runs[m][1].retained, 1) for m in runs}
    wall = {m: runs[m][1].wall_time / max(runs[m][1].retained, 1) for m in runs}
    ok = reached and cand["search"] < cand["random"] and wall["random"] < wall["search"] and seconds < LIMITS[6]
    detail = (f"target {TARGET} reached={reached}; candidates/case search {cand['search']:.2f} < random "
              f"{cand['random']:.2f}; seconds/case random {wall['random']:.4f} < search {wall['search']:.4f}")
    record(acceptance_log, 6, ok, detail, seconds)


def test_criterion_7_realism_ordering(desk, acceptance_log):
    def run():
        real = desk.train.images
        rng = np.random.default_rng(0)
        labels = np.arange(len(desk.val)) % 5
        u = rng.standard_normal((len(labels), desk.stage2.latent_dim))
        samples = np.concatenate([sample_pipeline(u[labels == c], c, desk.stage1, desk.stage2) for c in range(5)])
        samples = samples.reshape((-1,) + real.shape[1:])
        noise = rng.random(samples.shape).astype(np.float32)
        values = {
            "self": fid_report(real, real, desk.extractor).mean,
            "vae": fid_report(real, samples, desk.extractor).mean,
            "noise": fid_report(real, noise, desk.extractor).mean,
        }
        grid = []
        for amp in NOISE_GRID:
            noisy = np.clip(desk.val.images + amp * rng.standard_normal(desk.val.images.shape), 0, 1)
            grid.append(fid_report(real, noisy.astype(np.float32), desk.extractor).mean)
        return values, grid

    (values, grid), seconds = timed(run)
    monotone = bool(np.all(np.diff(grid) > 0))
    ok = values["self"] == 0.0 and values["vae"] < values["noise"] and monotone and seconds < LIMITS[7]
    detail = (f"FID(real,real)={values['self']:g}; FID vae {values['vae']:.3f} < noise {values['noise']:.3f}; "
              f"noise grid {', '.join(f'{g:.3f}' for g in grid)} increasing={monotone}")
    record(acceptance_log, 7, ok, detail, seconds)


def _suite_bytes(suite, path):
    export_suite(suite, path)
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(Path(path).rglob("*")) if p.is_file()}


def test_criterion_8_determinism(desk, faithfulness, tradeoff, tmp_path, acceptance_log):
    again = desk_module.build(seed=0)
    models = {
        "stage1": (desk.stage1.to_bytes(), again.stage1.to_bytes()),
        "stage2": (desk.stage2.to_bytes(), again.stage2.to_bytes()),
        "mut": (desk.mut.to_bytes(), again.mut.to_bytes()),
        "oracle": (desk.oracle.to_bytes(), again.oracle.to_bytes()),
        "extractor": (desk.extractor.to_bytes(), again.extractor.to_bytes()),
    }
    same = {name: a == b for name, (a, b) in models.items()}
    same["criterion 4"] = (desk.mut_report.val_accuracy == again.mut_report.val_accuracy
                           and conditioning_fidelity(desk) == conditioning_fidelity(again))
    reruns = {**faithfulness_runs(again), **tradeoff_runs(again)}
    firsts = {**faithfulness[0], **tradeoff[0]}
    for name, (suite, report) in firsts.items():
        suite2, report2 = reruns[name]
        same[f"suite {name}"] = (len(suite) == 0 and len(suite2) == 0) or (
            _suite_bytes(suite, tmp_path / name / "a") == _suite_bytes(suite2, tmp_path / name / "b"))
        same[f"report {name}"] = report.to_dict() == report2.to_dict() and report.trajectories == report2.trajectories
    differing = [k for k, v in same.items() if not v]
    detail = f"{len(same) - len(differing)}/{len(same)} artifacts identical after rebuild with seed 0"
    record(acceptance_log, 8, not differing, detail + (f" (differ: {', '.join(differing)})" if differing else ""))
