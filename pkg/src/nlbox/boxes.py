"""Nonlocal boxes: parity targets, their Bell expressions, and operational behaviors.

Bit conventions shared by every table in this module:

* an input or output is an ``n``-bit mask, bit ``i`` belonging to party ``i``;
* in the identity :class:`BoxMapping`, input ``0`` is observable ``x`` and an
  output XOR of ``0`` is correlation ``+1``.

A :class:`BoxBehavior` either holds integer numerators over one shared
denominator (exact tables: perfect, noisy, LHV) or plain floats (GHZ).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import combinations
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .inequality import BellExpression
from .strategies import DeterministicStrategy, GhzStrategy

REAL_TOLERANCE = 1e-12


class BoxError(ValueError):
    pass


class NonUnitExpression(BoxError):
    pass


def popcount(x: int) -> int:
    return bin(x).count("1")


def _parities(n: int) -> np.ndarray:
    idx = np.arange(1 << n)
    par = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        par ^= (idx >> i) & 1
    return par


def bits_to_str(mask: int, n: int) -> str:
    return "".join("1" if (mask >> i) & 1 else "0" for i in range(n))


def str_to_bits(text: str) -> int:
    if set(text) - {"0", "1"}:
        raise BoxError(f"bit string {text!r} must contain only 0/1")
    return sum(1 << i for i, ch in enumerate(text) if ch == "1")


# ---------------------------------------------------------------------------
# Targets and mappings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxPolynomial:
    """Target function ``g``: the required XOR of outputs for each input mask."""

    n: int
    target: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.target) != 1 << self.n:
            raise BoxError(f"target table needs {1 << self.n} entries, got {len(self.target)}")
        if any(v not in (0, 1) for v in self.target):
            raise BoxError("target values must be bits")
        object.__setattr__(self, "target", tuple(int(v) for v in self.target))

    def __call__(self, z: int) -> int:
        return self.target[z]

    @classmethod
    def from_function(cls, n: int, fn: Callable[[int], int]) -> "BoxPolynomial":
        return cls(n, tuple(int(fn(z)) & 1 for z in range(1 << n)))


def pairwise_and_parity(z: int, n: int) -> int:
    """XOR over all pairs ``i < j`` of ``z_i AND z_j``, counted pair by pair."""
    bits = [(z >> i) & 1 for i in range(n)]
    acc = 0
    for i, j in combinations(range(n), 2):
        acc ^= bits[i] & bits[j]
    return acc


def sign_rule(q: int) -> int:
    """1 exactly when ``q(q-1)/2`` is odd, ``q`` being the number of 1 inputs."""
    return (q * (q - 1) // 2) & 1


def svetlichny_box(n: int) -> BoxPolynomial:
    if n < 2:
        raise BoxError("a nonlocal box needs at least two parties")
    return BoxPolynomial(n, tuple(sign_rule(popcount(z)) for z in range(1 << n)))


def pr_box() -> BoxPolynomial:
    return svetlichny_box(2)


@dataclass(frozen=True)
class BoxMapping:
    """How box bits translate into Bell-expression labels.

    ``input_swap``: when false, input 0 is observable ``x``.
    ``output_swap``: when false, output XOR 0 is correlation ``+1``.
    """

    input_swap: bool = False
    output_swap: bool = False

    def setting_to_input(self, setting: int, n: int) -> int:
        return setting ^ ((1 << n) - 1) if self.input_swap else setting

    @property
    def sign(self) -> int:
        return -1 if self.output_swap else 1


IDENTITY = BoxMapping()
ALL_MAPPINGS = tuple(BoxMapping(i, o) for i in (False, True) for o in (False, True))


def box_to_bell(p: BoxPolynomial, m: BoxMapping = IDENTITY) -> BellExpression:
    """Unit expression whose sign at each setting is the correlation the box forces."""
    terms = {}
    for s in range(1 << p.n):
        z = m.setting_to_input(s, p.n)
        terms[s] = m.sign * (-1 if p(z) else 1)
    return BellExpression(p.n, terms)


def _require_unit(e: BellExpression) -> None:
    if any(abs(c) != 1 for c in e.terms.values()):
        raise NonUnitExpression("expression must have +-1 coefficients; apply unit_form first")


def find_mapping(p: BoxPolynomial, e: BellExpression) -> Optional[BoxMapping]:
    """First uniform mapping under which ``p`` produces exactly ``e``, or ``None``."""
    _require_unit(e)
    if e.n != p.n:
        raise BoxError(f"party counts differ: box {p.n}, expression {e.n}")
    for m in ALL_MAPPINGS:
        if box_to_bell(p, m) == e:
            return m
    return None


# ---------------------------------------------------------------------------
# Behaviors
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BoxBehavior:
    """Conditional distribution ``P(output | input)`` of an ``n``-party box.

    ``probs[z, o]`` is the probability (exact tables: the numerator over
    ``denominator``) of output mask ``o`` at input mask ``z``.
    """

    n: int
    probs: np.ndarray
    denominator: Optional[int] = None
    label: str = ""

    def __post_init__(self) -> None:
        size = 1 << self.n
        probs = np.asarray(self.probs)
        if probs.shape != (size, size):
            raise BoxError(f"table must be {size}x{size}, got {probs.shape}")
        if self.denominator is not None:
            den = int(self.denominator)
            if den <= 0:
                raise BoxError("denominator must be positive")
            ints = np.vectorize(int, otypes=[object])(probs) if probs.dtype == object else probs.astype(np.int64)
            g = math.gcd(den, *(int(v) for v in np.unique(ints)))
            ints = ints // g
            den //= g
            if ints.dtype == object and den < 2**62 // size:
                ints = ints.astype(np.int64)
            object.__setattr__(self, "denominator", den)
            probs = ints
        else:
            probs = probs.astype(float)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def exact(self) -> bool:
        return self.denominator is not None

    def prob(self, z: int, o: int) -> Union[Fraction, float]:
        v = self.probs[z, o]
        return Fraction(int(v), self.denominator) if self.exact else float(v)

    def row(self, z: int) -> list:
        return [self.prob(z, o) for o in range(1 << self.n)]

    def as_float(self) -> np.ndarray:
        if self.exact:
            return self.probs.astype(float) / self.denominator
        return np.array(self.probs, dtype=float)

    @cached_property
    def _cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs, axis=1)

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        rows = []
        for z in range(1 << self.n):
            if self.exact:
                probs = [_fraction_str(p) for p in self.row(z)]
            else:
                probs = [float(p) for p in self.probs[z]]
            rows.append({"input": bits_to_str(z, self.n), "probs": probs})
        return {"n": self.n, "label": self.label, "rows": rows}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "BoxBehavior":
        n = int(data["n"])
        size = 1 << n
        raw = [[None] * size for _ in range(size)]
        for row in data["rows"]:
            z = str_to_bits(row["input"])
            if len(row["probs"]) != size:
                raise BoxError(f"row {row['input']} has {len(row['probs'])} entries, need {size}")
            raw[z] = list(row["probs"])
        if any(r[0] is None for r in raw):
            raise BoxError("table is missing input rows")
        flat = [v for r in raw for v in r]
        if all(isinstance(v, str) for v in flat):
            fr = [[Fraction(v) for v in r] for r in raw]
            den = math.lcm(*(f.denominator for r in fr for f in r))
            nums = np.array([[int(f * den) for f in r] for r in fr], dtype=object)
            return cls(n, nums, den, data.get("label", ""))
        return cls(n, np.array([[float(Fraction(v)) if isinstance(v, str) else float(v) for v in r] for r in raw]),
                   None, data.get("label", ""))

    @classmethod
    def from_json(cls, text: str) -> "BoxBehavior":
        return cls.from_dict(json.loads(text))


def _fraction_str(f: Fraction) -> str:
    return f"{f.numerator}/{f.denominator}"


def _as_fraction(p: Union[float, str, Fraction]) -> Fraction:
    # floats go through their shortest repr so 0.9 means 9/10, not the binary expansion
    if isinstance(p, float):
        return Fraction(repr(p))
    return Fraction(p)


def canonical_distribution(e: BellExpression, mapping: BoxMapping = IDENTITY) -> BoxBehavior:
    """The non-signaling box that attains every sign of a unit expression.

    Full joints are ``(1 + c(s) (-1)^t) / 2^n`` with ``t`` the number of
    outputs read as -1, so every row is normalized, each joint is ``0`` or
    ``2^(1-n)`` and every strict-subset marginal is uniform.  Settings
    absent from ``e`` get the uniform row.
    """
    _require_unit(e)
    n = e.n
    size = 1 << n
    par = _parities(n)
    probs = np.zeros((size, size), dtype=np.int64)
    for s in range(size):
        c = int(e[s]) * mapping.sign
        z = mapping.setting_to_input(s, n)
        probs[z] = 1 + c * (1 - 2 * par)
    label = "perfect" if len(e) == size else "perfect(partial)"
    return BoxBehavior(n, probs, size, label)


def perfect_box(p: BoxPolynomial) -> BoxBehavior:
    return canonical_distribution(box_to_bell(p))


def noisy_box(n: int, p: Union[float, str, Fraction], polynomial: Optional[BoxPolynomial] = None) -> BoxBehavior:
    """Perfect box whose last output bit is flipped with probability ``1 - p``."""
    pf = _as_fraction(p)
    if not Fraction(1, 2) <= pf <= 1:
        raise BoxError(f"p must lie in [1/2, 1], got {p}")
    poly = polynomial if polynomial is not None else svetlichny_box(n)
    if poly.n != n:
        raise BoxError("polynomial arity does not match n")
    base = perfect_box(poly)
    size = 1 << n
    flipped = base.probs[:, np.arange(size) ^ (1 << (n - 1))]
    a, b = pf.numerator, pf.denominator
    nums = a * base.probs.astype(object) + (b - a) * flipped.astype(object)
    return BoxBehavior(n, nums, b * base.denominator, f"noisy({pf})")


def lhv_strategy_box(strategy: DeterministicStrategy) -> BoxBehavior:
    """Deterministic table: each party outputs 1 exactly when its predetermined sign is -1."""
    n = strategy.n
    size = 1 << n
    probs = np.zeros((size, size), dtype=np.int64)
    for z in range(size):
        out = 0
        for i in range(n):
            if strategy.outcome(i, (z >> i) & 1) < 0:
                out |= 1 << i
        probs[z, out] = 1
    return BoxBehavior(n, probs, 1, f"lhv({strategy.index})")


def ghz_box(angles: GhzStrategy) -> BoxBehavior:
    n = angles.n
    corr = angles.correlations()
    sign = 1 - 2 * _parities(n)
    probs = (1 + np.outer(corr, sign)) / (1 << n)
    label = "ghz(" + ",".join(f"{a:.12g}/{b:.12g}" for a, b in angles.angles) + ")"
    return BoxBehavior(n, probs, None, label)


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


def _tensor(b: BoxBehavior) -> np.ndarray:
    return b.probs.reshape((2,) * (2 * b.n))


def _in_axis(b: BoxBehavior, party: int) -> int:
    return b.n - 1 - party


def _out_axis(b: BoxBehavior, party: int) -> int:
    return 2 * b.n - 1 - party


def marginal(b: BoxBehavior, subset: Sequence[int], z: int) -> dict[int, Union[Fraction, float]]:
    """Distribution of the outputs of ``subset`` at input ``z``, keyed by the
    sub-mask whose bit ``k`` is the output of ``subset[k]``."""
    subset = list(subset)
    out: dict[int, Union[Fraction, float]] = {}
    for o in range(1 << b.n):
        key = sum(((o >> p) & 1) << k for k, p in enumerate(subset))
        out[key] = out.get(key, 0) + b.prob(z, o)
    return out


@dataclass
class NonSignalingReport:
    n: int
    exact: bool
    normalized: bool = True
    violations: list[tuple[tuple[int, ...], str]] = field(default_factory=list)
    subsets_checked: int = 0

    @property
    def ok(self) -> bool:
        return self.normalized and not self.violations

    def lines(self) -> Iterator[str]:
        yield f"normalization: {'pass' if self.normalized else 'FAIL'}"
        yield (f"non-signaling ({self.subsets_checked} subsets): "
               f"{'pass' if not self.violations else 'FAIL'}")
        for subset, detail in self.violations:
            parties = ",".join(str(p + 1) for p in subset)
            yield f"  subset {{{parties}}}: {detail}"


def verify_nonsignaling(b: BoxBehavior, tol: float = REAL_TOLERANCE) -> NonSignalingReport:
    """Check row normalization and that no strict subset's marginal sees outside inputs.

    Exact tables are compared with integer equality; real tables within ``tol``.
    """
    report = NonSignalingReport(b.n, b.exact)
    rows = b.probs.sum(axis=1)
    if b.exact:
        report.normalized = bool(np.all(rows == b.denominator)) and bool(np.all(b.probs >= 0))
    else:
        report.normalized = bool(np.all(np.abs(rows - 1) <= tol)) and bool(np.all(b.probs >= -tol))
    if not report.normalized:
        report.violations.append(((), "rows do not form probability distributions"))

    t = _tensor(b)
    parties = range(b.n)
    for k in range(1, b.n):
        for subset in combinations(parties, k):
            report.subsets_checked += 1
            outside = [p for p in parties if p not in subset]
            marg = t.sum(axis=tuple(_out_axis(b, p) for p in outside))
            # marg keeps all input axes; outside parties' input axes sit at the same positions
            ref = marg
            for p in outside:
                ref = np.take(ref, [0], axis=_in_axis(b, p))
            diff = marg - ref
            if b.exact:
                if np.any(diff != 0):
                    worst = Fraction(int(np.max(np.abs(diff))), b.denominator)
                    report.violations.append((subset, f"marginal depends on other inputs (max shift {worst})"))
            else:
                worst = float(np.max(np.abs(diff)))
                if worst > tol:
                    report.violations.append((subset, f"marginal depends on other inputs (max shift {worst:.3g})"))
    return report


def correlations(b: BoxBehavior, mapping: BoxMapping = IDENTITY) -> list:
    """Correlation at each Bell setting read through ``mapping`` (indexed by setting)."""
    sign = 1 - 2 * _parities(b.n)
    raw = b.probs @ sign if not b.exact else b.probs.astype(object) @ sign.astype(object)
    out = []
    for s in range(1 << b.n):
        z = mapping.setting_to_input(s, b.n)
        v = raw[z] * mapping.sign
        out.append(Fraction(int(v), b.denominator) if b.exact else float(v))
    return out


def success_probability(b: BoxBehavior, p: BoxPolynomial) -> Union[Fraction, float]:
    """Probability the output XOR equals ``g(z)`` for uniformly random input ``z``."""
    if b.n != p.n:
        raise BoxError(f"dimension mismatch: box has {b.n} parties, target {p.n}")
    size = 1 << b.n
    par = _parities(b.n)
    target = np.array(p.target)
    hit = par[None, :] == target[:, None]
    if b.exact:
        total = int(b.probs.astype(object)[hit].sum())
        return Fraction(total, b.denominator * size)
    return float(b.probs[hit].sum()) / size


def sample(b: BoxBehavior, z: int, rng: np.random.Generator) -> int:
    """One output mask drawn from row ``z``."""
    cum = b._cumulative[z]
    if b.exact:
        r = int(rng.integers(b.denominator))
    else:
        r = rng.random() * cum[-1]
    return min(int(np.searchsorted(cum, r, side="right")), (1 << b.n) - 1)


def sample_many(b: BoxBehavior, inputs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`sample`: one independent draw per entry of ``inputs``."""
    inputs = np.asarray(inputs, dtype=np.int64)
    if b.exact:
        r = rng.integers(b.denominator, size=len(inputs))
    else:
        r = rng.random(len(inputs))
    out = np.empty(len(inputs), dtype=np.int64)
    cum = b._cumulative
    for z in np.unique(inputs):
        sel = inputs == z
        thresholds = r[sel] if b.exact else r[sel] * cum[z, -1]
        out[sel] = np.searchsorted(cum[z], thresholds, side="right")
    return np.minimum(out, (1 << b.n) - 1)


def with_signaling_fault(b: BoxBehavior) -> BoxBehavior:
    """Copy of an exact box in which party 1 always outputs 0 once party 2's input is 1.

    Rows stay normalized but party 1's marginal now reveals party 2's input;
    used to self-test the verifier.
    """
    if not b.exact or b.n < 2:
        raise BoxError("fault injection needs an exact box with at least two parties")
    size = 1 << b.n
    probs = np.array(b.probs, dtype=object)
    for z in range(size):
        if (z >> 1) & 1:
            for o in range(1, size, 2):
                probs[z, o - 1] += probs[z, o]
                probs[z, o] = 0
    return BoxBehavior(b.n, probs, b.denominator, b.label + "+fault")


__all__ = [
    "ALL_MAPPINGS",
    "IDENTITY",
    "BoxBehavior",
    "BoxError",
    "BoxMapping",
    "BoxPolynomial",
    "NonSignalingReport",
    "NonUnitExpression",
    "box_to_bell",
    "canonical_distribution",
    "correlations",
    "find_mapping",
    "ghz_box",
    "lhv_strategy_box",
    "marginal",
    "noisy_box",
    "pairwise_and_parity",
    "perfect_box",
    "popcount",
    "pr_box",
    "sample",
    "sample_many",
    "sign_rule",
    "success_probability",
    "svetlichny_box",
    "verify_nonsignaling",
    "with_signaling_fault",
]
