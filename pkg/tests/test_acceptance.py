"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
quantities before asserting, so the summary is visible in ``pytest -v``
output even when everything passes.
"""

import math
import os
import subprocess
import sys
import time
from fractions import Fraction
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from nlbox.boxes import (
    box_to_bell,
    canonical_distribution,
    find_mapping,
    pairwise_and_parity,
    popcount,
    svetlichny_box,
    verify_nonsignaling,
)
from nlbox.bounds import GhzConfig, ghz_max, hybrid_max, lhv_max, sim_probability
from nlbox.inequality import algebraic_max, svetlichny, unit_form
from nlbox.protocol import (
    BitTape,
    Scenario,
    SharedRandomness,
    base_protocol,
    bipartite_equality_success,
    bipartite_threshold_bisection,
    boost_curve,
    equality_success,
    fixed_point_s,
    run_trials,
    thresholds,
)

TESTS = Path(__file__).parent
THREADS = min(os.cpu_count() or 1, 8)


@pytest.fixture
def report(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, detail
    return emit


def sigma(p, trials):
    return math.sqrt(p * (1 - p) / trials)


def test_c01_thresholds(report):
    thresholds()
    times = []
    for _ in range(7):
        t0 = time.perf_counter()
        p2, p3 = thresholds()
        times.append(time.perf_counter() - t0)
    elapsed = sorted(times)[len(times) // 2]
    cross = bipartite_threshold_bisection()
    ok = abs(p2 - 0.908248) <= 1e-6 and abs(p2 - cross) <= 1e-6 and 0.9365 <= p3 <= 0.9375 and elapsed < 1e-3
    report("1 thresholds", ok, f"p2={p2:.9f} (bisection {cross:.9f}) p3={p3:.9f} time={elapsed * 1e3:.3f} ms")


def test_c02_quantum_constancy(report):
    t0 = time.perf_counter()
    probs = {}
    for n in range(2, 7):
        e = svetlichny(n)
        result = ghz_max(e, GhzConfig(multistarts=32))
        probs[n] = sim_probability(result.value, n, algebraic_max(e))
    elapsed = time.perf_counter() - t0
    ok = all(abs(p - 0.853553) <= 1e-4 for p in probs.values()) and elapsed < 60
    detail = " ".join(f"n={n}:{p:.6f}" for n, p in probs.items())
    report("2 quantum constancy", ok, f"{detail} time={elapsed:.2f} s")


def test_c03_lhv_law(report):
    t0 = time.perf_counter()
    got = {}
    for n in range(2, 7):
        e = svetlichny(n)
        got[n] = sim_probability(lhv_max(e).value, n, algebraic_max(e))
    elapsed = time.perf_counter() - t0
    ok = all(got[n] == Fraction(1, 2) + Fraction(1, 2 ** (n // 2 + 1)) for n in got) and elapsed < 10
    detail = " ".join(f"n={n}:{p}" for n, p in got.items())
    report("3 LHV law", ok, f"{detail} time={elapsed:.3f} s")


def test_c04_bound_triple(report):
    rows = []
    ok = True
    for n in (3, 4, 5):
        e = svetlichny(n)
        lhv = lhv_max(e).value
        hyb = hybrid_max(e).value
        q = ghz_max(e).value
        want_q = 2 ** (0.5 + n // 2)
        ok &= lhv == 2 and hyb == 2 ** (n // 2) and abs(q - want_q) <= 1e-6
        rows.append(f"n={n}:({lhv}, {hyb}, {q:.9f})")
    report("4 bound triple", ok, " ".join(rows))


def test_c05_correspondence(report):
    t0 = time.perf_counter()
    found = {}
    for n in range(2, 9):
        unit, _ = unit_form(svetlichny(n))
        found[n] = find_mapping(svetlichny_box(n), unit)
    sign_ok = True
    for n in range(2, 13):
        box = svetlichny_box(n)
        sign_ok &= all(
            box(z) == pairwise_and_parity(z, n) == (popcount(z) * (popcount(z) - 1) // 2) % 2
            for z in range(1 << n)
        )
    elapsed = time.perf_counter() - t0
    ok = all(m is not None for m in found.values()) and sign_ok and elapsed < 10
    maps = " ".join(f"n={n}:{'T' if m.input_swap else 'F'}{'T' if m.output_swap else 'F'}"
                    for n, m in found.items() if m is not None)
    report("5 correspondence", ok, f"mappings {maps}; sign rule to n=12 {'ok' if sign_ok else 'broken'}; "
           f"time={elapsed:.2f} s")


def test_c06_nonsignaling(report):
    ok = True
    notes = []
    for n in range(2, 9):
        b = canonical_distribution(box_to_bell(svetlichny_box(n)))
        rep = verify_nonsignaling(b)
        size = 1 << n
        values = set(np.unique(b.probs).tolist())
        joints = {Fraction(v, b.denominator) for v in values} == {Fraction(0), Fraction(2, size)}
        # every k-party marginal of every row equals 2^-k
        t = b.probs.reshape((size,) + (2,) * n)
        uniform = True
        for k in range(1, n):
            for subset in combinations(range(n), k):
                axes = tuple(1 + (n - 1 - p) for p in range(n) if p not in subset)
                marg = t.sum(axis=axes)
                uniform &= bool(np.all(marg * 2**k == b.denominator))
        ok &= rep.ok and rep.exact and joints and uniform
        notes.append(f"n={n}:{'ok' if rep.ok and joints and uniform else 'bad'}")
    report("6 non-signaling", ok, " ".join(notes))


def test_c07_equality_protocols(report):
    t0 = time.perf_counter()
    p, n, trials = 0.95, 4, 100_000
    multi = run_trials(Scenario.from_dict({"protocol": "equality", "n": n, "box": {"kind": "noisy", "p": p},
                                           "trials": trials, "seed": 2008}), threads=THREADS)
    bi = run_trials(Scenario.from_dict({"protocol": "equality", "n": n, "box": {"kind": "noisy", "p": p},
                                        "variant": "bipartite", "trials": trials, "seed": 2008}), threads=THREADS)
    elapsed = time.perf_counter() - t0
    a_multi = p**3 + 3 * p * (1 - p) ** 2
    a_bi = 0.5 * (1 + (2 * p - 1) ** (n * (n - 1)))
    ok = (
        abs(multi.probability - a_multi) <= 3 * sigma(a_multi, trials)
        and abs(bi.probability - a_bi) <= 3 * sigma(a_bi, trials)
        and equality_success(p) == pytest.approx(a_multi)
        and bipartite_equality_success(n, p) == pytest.approx(a_bi)
        and multi.probability > bi.probability
        and a_multi > a_bi
        and multi.audit_passed and bi.audit_passed
        and elapsed < 60
    )
    report("7 equality protocols", ok,
           f"3-box {multi.probability:.5f} vs {a_multi:.5f} (3σ={3 * sigma(a_multi, trials):.5f}); "
           f"bipartite {bi.probability:.5f} vs {a_bi:.5f} (3σ={3 * sigma(a_bi, trials):.5f}); "
           f"time={elapsed:.1f} s")


def test_c08_boosting(report):
    q = 0.87
    # the default 64-round cap stops short at q = 0.87; let the 1e-9 step rule decide instead
    curve = boost_curve(0.51, q, round_cap=1000)
    s = fixed_point_s(q)
    fixed_ok = abs(curve[-1] - s) <= 1e-6
    trials = 200_000
    stats = run_trials(Scenario.from_dict({"protocol": "end_to_end", "n": 3, "box": {"kind": "noisy", "p": 0.95},
                                           "rounds": 3, "trials": trials, "seed": 2008}), threads=THREADS)
    emp = [c.p_empirical for c in stats.curve]
    ana = [c.p_analytic for c in stats.curve]
    monotone = all(b > a for a, b in zip(emp, emp[1:]))
    close = all(abs(e - a) <= 3 * sigma(a, trials) for e, a in zip(emp, ana))
    ok = fixed_ok and monotone and close and stats.audit_passed
    curve_txt = " ".join(f"r{c.round}:{c.p_empirical:.5f}/{c.p_analytic:.5f}" for c in stats.curve)
    report("8 boosting", ok, f"fixed point {curve[-1]:.9f} vs s={s:.9f} after {len(curve) - 1} rounds; "
           f"end-to-end {curve_txt}")


def _base_exhaustive(sizes, f):
    n, m = len(sizes), sum(sizes)
    total = m + (m + n - 1) + n
    idx = np.arange(1 << total)
    cols = ((idx[None, :] >> np.arange(total)[:, None]) & 1).astype(np.uint8)
    batch = cols.shape[1]
    off = np.cumsum([0, *sizes])
    inputs = [cols[off[i]:off[i + 1]] for i in range(n)]
    shared = SharedRandomness(batch, fixed=cols[m:2 * m + n - 1])
    private = [BitTape(batch, fixed=cols[2 * m + n - 1 + i:2 * m + n + i]) for i in range(n)]
    shares = base_protocol(f, inputs, shared, private)
    out = np.bitwise_xor.reduce(np.stack(shares), axis=0)
    return Fraction(int(np.sum(out == f(inputs))), batch)


def test_c09_base_protocol(report):
    and_f = lambda parts: np.bitwise_and.reduce(np.concatenate(parts), axis=0)
    results = {
        "M=2 (1,1)": _base_exhaustive((1, 1), and_f),
        "M=3 (1,1,1)": _base_exhaustive((1, 1, 1), and_f),
        "M=3 (2,1)": _base_exhaustive((2, 1), and_f),
    }
    want = {"M=2 (1,1)": Fraction(5, 8), "M=3 (1,1,1)": Fraction(9, 16), "M=3 (2,1)": Fraction(9, 16)}
    ok = results == want
    report("9 base protocol", ok, " ".join(f"{k}:{v}" for k, v in results.items()))


def test_c10_property_suites(report):
    rng = np.random.default_rng(10)
    identity_ok = True
    for trial in range(10_000):
        n = 2 + trial % 9
        xp, xpp = (int(v) for v in rng.integers(1 << n, size=2))
        lhs = pairwise_and_parity(xp, n) ^ pairwise_and_parity(xpp, n) ^ pairwise_and_parity(xp ^ xpp, n)
        rhs = 0
        for i in range(n):
            for j in range(n):
                if i != j:
                    rhs ^= ((xp >> i) & 1) & ((xpp >> j) & 1)
        identity_ok &= lhs == rhs
    suites = sorted(str(p) for p in TESTS.glob("test_*.py") if p.name != Path(__file__).name)
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *suites],
                          capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    ok = identity_ok and proc.returncode == 0
    report("10 property suites", ok, f"three-box identity on 10^4 vectors {'ok' if identity_ok else 'broken'}; "
           f"module suites: {summary}")
