from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlbox.boxes import noisy_box, pairwise_and_parity, perfect_box, svetlichny_box
from nlbox.protocol import (
    FIVE_SIXTHS,
    BitTape,
    PartyState,
    ProtocolError,
    QTooSmall,
    Scenario,
    ScenarioError,
    SharedRandomness,
    analytic_success,
    audit_party,
    base_protocol,
    base_success,
    bipartite_equality_success,
    bipartite_threshold,
    bipartite_threshold_bisection,
    boost_curve,
    boost_map,
    box_reliability,
    communication_bits,
    equality_program,
    equality_success,
    execute,
    fixed_point_s,
    majority3,
    nonlocal_equality,
    nonlocal_equality_bipartite,
    nonlocal_majority,
    run_trials,
    thresholds,
)
from nlbox.rng import RngStream


def all_input_triples(n):
    """Every assignment of three bits to each of ``n`` parties, as one batch."""
    total = 3 * n
    idx = np.arange(1 << total)
    bits = ((idx[None, :] >> np.arange(total)[:, None]) & 1).astype(np.uint8)
    return [[bits[3 * i + k] for k in range(3)] for i in range(n)]


def xor_all(shares):
    return np.bitwise_xor.reduce(np.stack(shares), axis=0)


@pytest.mark.parametrize("n", range(2, 6))
def test_equality_with_perfect_boxes_is_exact(n):
    triples = all_input_triples(n)
    z = [xor_all([t[k] for t in triples]) for k in range(3)]
    predicate = ((z[0] == z[1]) & (z[1] == z[2])).astype(np.uint8)
    box = perfect_box(svetlichny_box(n))
    shares = nonlocal_equality(n, triples, [box] * 3, RngStream(n).generator())
    assert np.array_equal(xor_all(shares), predicate)


@pytest.mark.parametrize("n", range(2, 5))
def test_bipartite_equality_with_perfect_boxes_is_exact(n):
    triples = all_input_triples(n)
    z = [xor_all([t[k] for t in triples]) for k in range(3)]
    predicate = ((z[0] == z[1]) & (z[1] == z[2])).astype(np.uint8)
    pr = perfect_box(svetlichny_box(2))
    boxes = {(i, j): pr for i in range(n) for j in range(n) if i != j}
    shares = nonlocal_equality_bipartite(n, triples, boxes, RngStream(n).generator())
    assert np.array_equal(xor_all(shares), predicate)


@pytest.mark.parametrize("n", range(2, 5))
def test_majority_with_perfect_boxes_is_exact(n):
    triples = all_input_triples(n)
    z = [xor_all([t[k] for t in triples]) for k in range(3)]
    maj = ((z[0].astype(int) + z[1] + z[2]) >= 2).astype(np.uint8)
    box = perfect_box(svetlichny_box(n))
    eq = nonlocal_equality(n, triples, [box] * 3, RngStream(0).generator())
    assert np.array_equal(xor_all(nonlocal_majority(triples, eq)), maj)


def test_majority_xor_reading_truth_table():
    # Maj(a, b, c) = not Eq(a, b, c) xor a xor b xor c on all 8 inputs
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                eq = int(a == b == c)
                assert (1 - eq) ^ a ^ b ^ c == int(a + b + c >= 2)


def test_three_box_identity_random_vectors():
    rng = np.random.default_rng(77)
    for trial in range(10_000):
        n = 2 + trial % 9
        xp = int(rng.integers(1 << n))
        xpp = int(rng.integers(1 << n))
        lhs = pairwise_and_parity(xp, n) ^ pairwise_and_parity(xpp, n) ^ pairwise_and_parity(xp ^ xpp, n)
        rhs = 0
        for i in range(n):
            for j in range(n):
                if i != j:
                    rhs ^= ((xp >> i) & 1) & ((xpp >> j) & 1)
        assert lhs == rhs


def test_wrong_box_arity_rejected():
    triples = all_input_triples(2)
    with pytest.raises(ProtocolError):
        nonlocal_equality(2, triples, [perfect_box(svetlichny_box(3))] * 3, RngStream(0).generator())
    with pytest.raises(ProtocolError):
        nonlocal_equality_bipartite(3, all_input_triples(3), {}, RngStream(0).generator())


def run_base_exhaustively(sizes, f):
    """Enumerate every input, shared tape and private coin; return the success fraction."""
    n = len(sizes)
    m = sum(sizes)
    shared_bits = m + n - 1
    total = m + shared_bits + n
    idx = np.arange(1 << total)
    cols = ((idx[None, :] >> np.arange(total)[:, None]) & 1).astype(np.uint8)
    batch = cols.shape[1]
    offsets = np.cumsum([0, *sizes])
    inputs = [cols[offsets[i]:offsets[i + 1]] for i in range(n)]
    shared = SharedRandomness(batch, fixed=cols[m:m + shared_bits])
    private = [BitTape(batch, fixed=cols[m + shared_bits + i:m + shared_bits + i + 1]) for i in range(n)]
    shares = base_protocol(f, inputs, shared, private)
    truth = np.asarray(f(inputs), dtype=np.uint8)
    return Fraction(int(np.sum(xor_all(shares) == truth)), batch), inputs, xor_all(shares), truth


def and_all(parts):
    return np.bitwise_and.reduce(np.concatenate(parts, axis=0), axis=0)


def parity_all(parts):
    return np.bitwise_xor.reduce(np.concatenate(parts, axis=0), axis=0)


def first_or_last(parts):
    flat = np.concatenate(parts, axis=0)
    return flat[0] | flat[-1]


@pytest.mark.parametrize("sizes", [(1, 1), (2, 1), (1, 1, 1), (1, 2)])
@pytest.mark.parametrize("f", [and_all, parity_all, first_or_last])
def test_base_protocol_exhaustive(sizes, f):
    m = sum(sizes)
    success, inputs, result, truth = run_base_exhaustively(sizes, f)
    assert success == base_success(m) == Fraction(1, 2) + Fraction(1, 2 ** (m + 1))
    # the success rate is the same for every fixed input, not just on average
    keys = sum(np.concatenate(inputs, axis=0)[k].astype(int) << k for k in range(m))
    for key in range(1 << m):
        sel = keys == key
        assert Fraction(int(np.sum(result[sel] == truth[sel])), int(sel.sum())) == base_success(m)


def test_fixed_tape_exhaustion_raises():
    tape = BitTape(4, fixed=np.zeros((1, 4)))
    cur = tape.cursor()
    cur.bits(1)
    with pytest.raises(ProtocolError):
        cur.bits(1)


def _run_equality_batch(n, box, batch, seed, make):
    rng = RngStream(seed)
    triples = rng.child(0).generator().integers(0, 2, size=(n, 3, batch), dtype=np.uint8)
    shared = SharedRandomness(batch, rng.child(1))
    states = [PartyState(i, n, triples[i], shared.view(), BitTape(batch, rng.child(2 + i).generator()).cursor())
              for i in range(n)]
    parties = tuple(range(n))
    shares, transcripts = execute([make(st) for st in states], lambda d: (box, parties), rng.child(99).generator(), states)
    return triples, shares, transcripts


def test_audit_passes_for_honest_parties():
    n = 3
    ids = [("eq", (), k) for k in range(3)]
    make = lambda st: equality_program(st, list(st.inputs), ids)
    triples, _, transcripts = _run_equality_batch(n, noisy_box(n, 0.9), 256, 5, make)
    assert all(audit_party(make, i, n, triples[i], transcripts[i], 256) for i in range(n))


def test_audit_catches_a_hidden_channel():
    n = 3
    ids = [("eq", (), k) for k in range(3)]
    mailbox = []

    def cheating(st):
        x1, x2, x3 = st.inputs
        if st.index == 0:
            mailbox.append(x1.copy())
        extra = mailbox.pop() if (st.index == 1 and mailbox) else np.zeros_like(x1)
        share = yield from equality_program(st, [x1, x2, x3], ids)
        return share ^ extra

    triples, _, transcripts = _run_equality_batch(n, noisy_box(n, 0.9), 256, 6, cheating)
    mailbox.clear()
    # party 1's behaviour depended on a message it cannot reproduce alone
    assert not audit_party(cheating, 1, n, triples[1], transcripts[1], 256)


def test_closed_forms():
    assert equality_success(1.0) == 1.0
    assert equality_success(0.95) == pytest.approx(0.95**3 + 3 * 0.95 * 0.05**2)
    assert bipartite_equality_success(2, 1.0) == 1.0
    assert majority3(0.5) == pytest.approx(0.5)
    assert communication_bits(5) == 4


@settings(max_examples=200, deadline=None)
@given(n=st.integers(3, 12), p=st.floats(0.9001, 0.9999))
def test_multipartite_dominates_bipartite(n, p):
    assert equality_success(p) > bipartite_equality_success(n, p)


@settings(max_examples=200, deadline=None)
@given(q=st.floats(FIVE_SIXTHS + 1e-6, 1.0), a=st.floats(0.5, 1.0), b=st.floats(0.5, 1.0))
def test_boost_map_is_increasing(q, a, b):
    lo, hi = sorted((a, b))
    assert boost_map(lo, q) <= boost_map(hi, q) + 1e-15


@settings(max_examples=200, deadline=None)
@given(a=st.floats(FIVE_SIXTHS + 1e-6, 1.0), b=st.floats(FIVE_SIXTHS + 1e-6, 1.0))
def test_fixed_point_increasing_in_q(a, b):
    lo, hi = sorted((a, b))
    assert fixed_point_s(lo) <= fixed_point_s(hi)


@pytest.mark.parametrize("q", [0.84, 0.87, 0.9, 0.95, 1.0])
def test_fixed_point_is_stationary(q):
    s = fixed_point_s(q)
    assert boost_map(s, q) == pytest.approx(s, abs=1e-12)
    assert s > 0.5


def test_fixed_point_needs_q_above_five_sixths():
    with pytest.raises(QTooSmall):
        fixed_point_s(0.8)
    # below 5/6 boosting drives any start back to 1/2
    assert boost_curve(0.9, 0.8, rounds=200)[-1] == pytest.approx(0.5, abs=1e-6)


def test_boost_curve_shapes():
    assert len(boost_curve(0.6, 0.9, rounds=3)) == 4
    capped = boost_curve(0.51, 0.87)
    assert len(capped) == 65
    long = boost_curve(0.51, 0.87, round_cap=1000)
    assert abs(long[-1] - fixed_point_s(0.87)) < 1e-6
    assert all(b >= a for a, b in zip(long, long[1:]))


def test_thresholds():
    p2, p3 = thresholds()
    assert p2 == pytest.approx(0.908248, abs=1e-6)
    assert abs(bipartite_threshold() - bipartite_threshold_bisection()) < 1e-9
    assert 0.9365 <= p3 <= 0.9375
    assert equality_success(p3) == pytest.approx(FIVE_SIXTHS, abs=1e-10)
    assert thresholds().bipartite == p2 and thresholds().multipartite == p3


def test_box_reliability():
    assert box_reliability(noisy_box(3, 0.9)) == pytest.approx(0.9)
    assert box_reliability(perfect_box(svetlichny_box(4))) == 1.0


def test_scenario_parsing_and_validation():
    sc = Scenario.from_dict({"protocol": "equality", "n": 4, "box": {"kind": "noisy", "p": 0.95}, "seed": 3})
    assert sc.box_p == 0.95 and sc.seed == 3
    assert Scenario.from_dict(sc.to_dict()) == sc
    bad = [
        {"protocol": "nope", "n": 3},
        {"protocol": "equality", "n": 1},
        {"protocol": "equality"},
        {"protocol": "equality", "n": 3, "box": {"kind": "noisy"}},
        {"protocol": "equality", "n": 3, "box": {"kind": "noisy", "p": 0.2}},
        {"protocol": "equality", "n": 3, "trials": 0},
        {"protocol": "equality", "n": 3, "color": "red"},
        {"protocol": "equality", "n": "three"},
    ]
    for data in bad:
        with pytest.raises(ScenarioError):
            Scenario.from_dict(data)


def test_run_trials_matches_closed_form():
    sc = Scenario.from_dict({"protocol": "equality", "n": 3, "box": {"kind": "noisy", "p": 0.9},
                             "trials": 20_000, "seed": 11})
    stats = run_trials(sc)
    assert stats.analytic == pytest.approx(equality_success(0.9))
    assert stats.audit_passed is True
    assert stats.within(4)


def test_bipartite_run_and_analytic():
    sc = Scenario.from_dict({"protocol": "equality", "n": 3, "box": {"kind": "noisy", "p": 0.95},
                             "variant": "bipartite", "trials": 20_000, "seed": 12})
    stats = run_trials(sc)
    assert stats.analytic == pytest.approx(bipartite_equality_success(3, 0.95))
    assert stats.within(4) and stats.audit_passed


def test_run_trials_independent_of_threads():
    sc = Scenario.from_dict({"protocol": "majority", "n": 3, "box": {"kind": "noisy", "p": 0.93},
                             "trials": 5000, "seed": 4, "batch_size": 1000})
    a = run_trials(sc, threads=1)
    b = run_trials(sc, threads=3)
    assert a.to_json() == b.to_json()


def test_boost_curve_from_simulation():
    sc = Scenario.from_dict({"protocol": "boost", "n": 3, "box": {"kind": "perfect"}, "p0": 0.6,
                             "rounds": 2, "trials": 20_000, "seed": 9})
    stats = run_trials(sc)
    assert [c.round for c in stats.curve] == [0, 1, 2]
    for c in stats.curve:
        assert abs(c.p_empirical - c.p_analytic) <= 4 * np.sqrt(c.p_analytic * (1 - c.p_analytic) / c.trials)
    assert stats.curve_csv().splitlines()[0] == "round,p_empirical,p_analytic,stderr"


def test_analytic_unavailable_for_input_dependent_boxes():
    sc = Scenario.from_dict({"protocol": "equality", "n": 3, "box": {"kind": "lhv"}, "trials": 1000, "seed": 1})
    assert analytic_success(sc) is None
    stats = run_trials(sc)
    assert stats.analytic is None and stats.audit_passed


def test_end_to_end_leaf_matches_base_success():
    sc = Scenario.from_dict({"protocol": "end_to_end", "n": 3, "box": {"kind": "noisy", "p": 0.95},
                             "rounds": 0, "trials": 20_000, "seed": 2})
    assert analytic_success(sc) == pytest.approx(float(base_success(3)))
    stats = run_trials(sc)
    assert stats.within(4)
