"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts. Runtime limits are part of each criterion.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import odeco_tensor
from test_tsvd import gradient_check
from kgtsvd.cli import block_tensor, main, resolve_config
from kgtsvd.evaluation import evaluate_object_prediction, retrieval_monte_carlo
from kgtsvd.kg_data import load_kinship
from kgtsvd.qsim import (
    DensityOperator,
    exact_exponentiation,
    oracle_distribution,
    run_algorithm1,
    simulate_exponentiation,
    trotter_step_check,
)
from kgtsvd.sparsify import (
    SparsifyConfig,
    eps_total_thm1,
    required_probability_thm1,
    subsample,
    verify_reconstruction,
)
from kgtsvd.tensor_core import frobenius_norm, project
from kgtsvd.tsvd import (
    TrainConfig,
    TruncationSpec,
    greedy_tsvd,
    projection_operator,
    reconstruct,
    train_tsvd,
    truncate_or_project,
)


@pytest.fixture
def report(capsys):
    def _report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _report


def run_cli(argv, tmp_path):
    out = tmp_path / "out.jsonl"
    assert main([*argv, "--out", str(out)]) == 0
    return [json.loads(line) for line in out.read_text().splitlines()]


def random_density(rng, dim):
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    m = g @ g.conj().T
    return DensityOperator(m / np.trace(m).real, normalized=True)


def test_criterion_01_bound_table(tmp_path, report):
    t0 = time.perf_counter()
    records = run_cli(["bound-table", "--resolution", "1e-4"], tmp_path)
    elapsed = time.perf_counter() - t0
    rows = {r["x"]: r["p_min"] for r in records if r["record"] == "min_p"}
    expected = {-3.0: 0.2196, -2.0: 0.2184, -1.0: 0.1772}
    worst = max(abs(rows[x] - v) for x, v in expected.items())
    ok = worst <= 0.002 and elapsed < 5
    got = ", ".join(f"x={x:g}: {rows[x]:.4f}" for x in expected)
    assert report(1, ok, f"{got}; max deviation {worst:.1e}; {elapsed:.2f}s")


def test_criterion_02_worst_case_floor(tmp_path, report):
    t0 = time.perf_counter()
    records = run_cli(["bound-table", "--x-min=-20", "--x-max", "0", "--step", "0.01"], tmp_path)
    elapsed = time.perf_counter() - t0
    n_rows = sum(r["record"] == "min_p" for r in records)
    worst = next(r for r in records if r["record"] == "worst_case")
    ok = n_rows == 2001 and 0.218 <= worst["p_min"] <= 0.222 and elapsed < 30
    assert report(2, ok, f"max p_min {worst['p_min']:.4f} at x={worst['x']:.2f} over {n_rows} points; {elapsed:.1f}s")


def test_criterion_03_qsim_oracle(report):
    t0 = time.perf_counter()
    worst_exact, worst_tv = 0.0, 0.0
    for i in range(50):
        rng = np.random.default_rng(1000 + i)
        dims = tuple(int(d) for d in rng.integers(1, 5, 3))
        x = (rng.random(dims) < 0.5).astype(float)
        s = int(rng.integers(dims[0]))
        x[(s, *(int(rng.integers(d)) for d in dims[1:]))] = 1.0
        top = np.linalg.svd(x.reshape(dims[0], -1), compute_uv=False)[0]
        tau = float(rng.uniform(0, top))
        p = int(rng.integers(dims[1]))
        out = run_algorithm1(x, s, p, tau, shots=100_000, seed=i)
        oracle = oracle_distribution(x, s, tau)
        worst_exact = max(worst_exact, float(np.abs(out.distribution - oracle).max()))
        worst_tv = max(worst_tv, 0.5 * float(np.abs(out.counts / out.shots - oracle).sum()))
    elapsed = time.perf_counter() - t0
    ok = worst_exact <= 1e-10 and worst_tv < 0.02 and elapsed < 120
    assert report(3, ok, f"max |exact - oracle| {worst_exact:.1e}, max TV {worst_tv:.4f}; {elapsed:.1f}s")


def test_criterion_04_trotter_order(report):
    t0 = time.perf_counter()
    ratios = []
    for i in range(20):
        rng = np.random.default_rng(2000 + i)
        dim = int(rng.integers(2, 9))
        rho, sigma = random_density(rng, dim), random_density(rng, dim)
        ratios.append(trotter_step_check(rho, sigma, 0.01) / trotter_step_check(rho, sigma, 0.005))
    elapsed = time.perf_counter() - t0
    ok = all(3.5 <= r <= 4.5 for r in ratios) and elapsed < 60
    assert report(4, ok, f"ratios in [{min(ratios):.4f}, {max(ratios):.4f}]; {elapsed:.1f}s")


def test_criterion_05_exponentiation(report):
    t0 = time.perf_counter()
    pairs = []
    for i in range(10):
        rng = np.random.default_rng(3000 + i)
        dim = int(rng.integers(2, 9))
        g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
        a = (g + g.conj().T) / 2
        sigma = random_density(rng, dim)
        exact = exact_exponentiation(a, 1.0, sigma)
        errs = [np.linalg.norm(simulate_exponentiation(a, 1.0, n, sigma).matrix - exact) for n in (8, 32)]
        pairs.append(errs)
    elapsed = time.perf_counter() - t0
    ok = all(e4 < e1 for e1, e4 in pairs) and elapsed < 60
    shrink = [e4 / e1 for e1, e4 in pairs]
    assert report(5, ok, f"error(4n)/error(n) in [{min(shrink):.3f}, {max(shrink):.3f}]; {elapsed:.1f}s")


def test_criterion_06_greedy_exact(report):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(4000 + i)
        r = int(rng.integers(1, 4))
        dims = tuple(int(d) for d in rng.integers(r, 9, 3))
        x, _, _ = odeco_tensor(rng, dims, r)
        err = frobenius_norm(x - reconstruct(greedy_tsvd(x, r))) / frobenius_norm(x)
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 60
    assert report(6, ok, f"max relative error {worst:.1e}; {elapsed:.1f}s")


def test_criterion_07_projection_properties(report):
    t0 = time.perf_counter()
    slack = 1e-6
    fails = {"identity": 0, "inequality": 0, "master": 0}
    for i in range(200):
        rng = np.random.default_rng(5000 + i)
        dims = tuple(int(d) for d in rng.integers(2, 6, 3))
        big_r = int(rng.integers(1, min(dims) + 1))
        r = int(rng.integers(1, big_r + 1))
        a, _, _ = odeco_tensor(rng, dims, big_r)
        noise = rng.standard_normal(dims)
        b = a + noise * rng.uniform(0.01, 1.0) * frobenius_norm(a) / frobenius_norm(noise)

        full = greedy_tsvd(a, big_r)
        a_r = reconstruct(truncate_or_project(full, TruncationSpec(rank=r)))
        p_a = projection_operator(greedy_tsvd(a, r))
        p_b = projection_operator(greedy_tsvd(b, r))
        p_d = projection_operator(greedy_tsvd(a - b, r))

        if frobenius_norm(project(p_a, a) - a_r) > slack:
            fails["identity"] += 1
        if frobenius_norm(project(p_a, a)) < frobenius_norm(project(p_b, a)) - slack:
            fails["inequality"] += 1
        tail = frobenius_norm(a - a_r)
        head = frobenius_norm(a_r)
        nd = frobenius_norm(project(p_d, a - b))
        bound = 2 * tail + 2 * math.sqrt(head * tail) + 2 * math.sqrt(head * nd) + nd
        if frobenius_norm(a - project(p_b, b)) > bound + slack:
            fails["master"] += 1
    elapsed = time.perf_counter() - t0
    ok = not any(fails.values()) and elapsed < 120
    assert report(7, ok, f"failures out of 200: {fails}; {elapsed:.1f}s")


def test_criterion_08_gradients(report):
    t0 = time.perf_counter()
    worst = max(gradient_check(seed, gamma) for seed in range(10) for gamma in (0.0, 0.1))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    assert report(8, ok, f"max relative gradient error {worst:.1e}; {elapsed:.2f}s")


def test_criterion_09_subsample_reconstruction(report):
    t0 = time.perf_counter()
    a = block_tensor(10, 2)
    bound = required_probability_thm1(2, a.shape, 0.05, 1.5, frobenius_norm(a))
    eps0 = frobenius_norm(a - reconstruct(greedy_tsvd(a, 2))) / frobenius_norm(a)
    eps_total = eps_total_thm1(eps0, 1.5)
    rep = verify_reconstruction(a, SparsifyConfig(bound.value, seed=0), TruncationSpec(rank=2), trials=100,
                                eps_bound=eps_total)
    elapsed = time.perf_counter() - t0
    worst = max(rep.errors)
    ok = bound.feasible and len(rep.errors) == 100 and worst <= eps_total and elapsed < 120
    assert report(9, ok, f"p={bound.value:.4f}, worst error ratio {worst:.4f} <= {eps_total:.4f}; {elapsed:.1f}s")


def test_criterion_10_kinship(report):
    t0 = time.perf_counter()
    cfg = resolve_config("train", {}, {})
    keys = ("rank", "learning_rate", "epochs", "batch_size", "gamma", "p", "neg_ratio", "momentum", "init_std")
    tcfg = TrainConfig(seed=0, **{k: cfg[k] for k in keys})
    ds = load_kinship()
    with pytest.warns(RuntimeWarning, match="cannot be orthonormal"):
        model, log = train_tsvd(ds.train, ds.dims, tcfg)
    metrics = evaluate_object_prediction(model, ds.test, ds.known_true(), (1, 3, 10))
    elapsed = time.perf_counter() - t0
    pen0, pen_n = log.records[0].penalty, log.records[-1].penalty
    ok = (tcfg.rank == 64 and metrics.hits[10] >= 0.90 and metrics.mr <= 5 and pen_n < 0.1 * pen0
          and elapsed < 600)
    assert report(10, ok, f"Hits@10 {metrics.hits[10]:.4f}, MR {metrics.mr:.3f}, "
                          f"penalty {pen0:.1f} -> {pen_n:.2f} ({pen_n / pen0:.1%}); {elapsed:.0f}s")


def test_criterion_11_retrieval_bound(report):
    t0 = time.perf_counter()
    trials = [retrieval_monte_carlo(eps, n, instances=1000, mode=mode)
              for mode in ("sample", "topn") for eps in (0.1, 0.2, 0.3) for n in (1, 2, 3)]
    elapsed = time.perf_counter() - t0
    margin = min(t.rate - t.bound for t in trials)
    ok = all(t.holds for t in trials) and elapsed < 120
    tight = min(trials, key=lambda t: t.rate - t.bound)
    assert report(11, ok, f"smallest margin {margin:.4f} (eps={tight.eps}, n={tight.n}, "
                          f"rate {tight.rate:.3f} vs bound {tight.bound:.4f}); {elapsed:.1f}s")


def test_criterion_12_unbiased(report):
    t0 = time.perf_counter()
    a = np.ones((4, 4, 4))
    n = 10_000
    worst = 0.0
    for p in (0.3, 0.5, 0.9):
        acc = np.zeros_like(a)
        for seed in range(n):
            acc += subsample(a, SparsifyConfig(p, seed))
        se = math.sqrt((1 / p - 1) / n)
        worst = max(worst, float(np.abs(acc / n - 1).max() / se))
    elapsed = time.perf_counter() - t0
    ok = worst < 3 and elapsed < 30
    assert report(12, ok, f"max |mean - 1| = {worst:.2f} standard errors; {elapsed:.1f}s")
