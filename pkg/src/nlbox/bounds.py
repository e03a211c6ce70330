"""Bounds on Bell expressions: local, bipartition-hybrid, GHZ-quantum, algebraic.

LHV and hybrid maxima are exact (integer arithmetic over the expression's
dyadic numerators).  The quantum value is a lower-bound certificate found by
multistart gradient ascent over GHZ equatorial angles; no upper bound is
computed here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .inequality import BellExpression, algebraic_max, svetlichny
from .rng import RngStream, resolve_seed
from .strategies import DeterministicStrategy, GhzStrategy, phase_matrix

LHV_MAX_PARTIES = 12
HYBRID_MAX_BLOCK = 3

ALL_BOUNDS = ("lhv", "hybrid", "quantum", "algebraic")


class BoundsError(ValueError):
    pass


class LhvResult(NamedTuple):
    value: Fraction
    strategy: DeterministicStrategy


@dataclass(frozen=True)
class Bipartition:
    """Split of parties into two non-empty blocks; ``a`` always holds party 0."""

    n: int
    a: tuple[int, ...]

    def __post_init__(self) -> None:
        a = tuple(sorted(set(self.a)))
        if not a or len(a) >= self.n or a[0] != 0 or a[-1] >= self.n:
            raise BoundsError(f"invalid bipartition {self.a!r} of {self.n} parties")
        object.__setattr__(self, "a", a)

    @property
    def b(self) -> tuple[int, ...]:
        return tuple(p for p in range(self.n) if p not in self.a)

    def __str__(self) -> str:
        fmt = lambda block: "".join(str(p + 1) for p in block)
        return f"{fmt(self.a)}|{fmt(self.b)}"


class HybridResult(NamedTuple):
    value: Fraction
    bipartition: Bipartition


class GhzResult(NamedTuple):
    value: float
    strategy: GhzStrategy
    converged: bool
    iterations: int


@dataclass(frozen=True)
class GhzConfig:
    multistarts: int = 32
    tol: float = 1e-9
    max_iter: int = 10_000
    seed: Optional[int] = None


# ---------------------------------------------------------------------------
# LHV
# ---------------------------------------------------------------------------


def lhv_max(e: BellExpression, *, max_parties: int = LHV_MAX_PARTIES) -> LhvResult:
    """Exact maximum over the ``4**n`` deterministic strategies.

    Parties ``0..n-2`` are enumerated explicitly; the last party's best
    response is ``|v_x| + |v_y|``.  Ties go to the lowest strategy index.
    """
    n = e.n
    if n > max_parties:
        raise BoundsError(f"exhaustive LHV search limited to n <= {max_parties}, got {n}")
    dense, exponent = e.dense()
    cur = dense.reshape(-1, 1)
    for _ in range(n - 1):
        rows, prefixes = cur.shape
        cur = cur.reshape(rows // 2, 2, prefixes)
        x, y = cur[:, 0, :], cur[:, 1, :]
        # choice j: bit 0 negates e_x, bit 1 negates e_y
        cur = np.stack([x + y, y - x, x - y, -x - y], axis=1).reshape(rows // 2, 4 * prefixes)
    vx, vy = cur[0], cur[1]
    best = np.abs(vx) + np.abs(vy)
    top = best.max()
    last = (vx < 0).astype(np.int64) + 2 * (vy < 0).astype(np.int64)
    index = last * (4 ** (n - 1)) + np.arange(cur.shape[1], dtype=np.int64)
    winner = int(index[best == top].min())
    return LhvResult(Fraction(int(top), 1 << exponent), DeterministicStrategy.from_index(winner, n))


def lhv_value(e: BellExpression, strategy: DeterministicStrategy) -> Fraction:
    return sum((c * strategy.correlation(s) for s, c in e.terms.items()), Fraction(0))


# ---------------------------------------------------------------------------
# Hybrid (bipartition) bound
# ---------------------------------------------------------------------------


def bipartitions(n: int) -> list[Bipartition]:
    """All bipartitions, ordered by the bitmask of the block holding party 0."""
    out = []
    for mask in range(1, 1 << n, 2):
        if mask != (1 << n) - 1:
            out.append(Bipartition(n, tuple(p for p in range(n) if (mask >> p) & 1)))
    return out


def _sign_matrix(k: int) -> np.ndarray:
    """All ``2**(2**k)`` sign functions on ``k`` parties' settings, one per row."""
    width = 1 << k
    idx = np.arange(1 << width)[:, None]
    return 1 - 2 * ((idx >> np.arange(width)[None, :]) & 1)


def _block_matrix(dense: np.ndarray, n: int, small: Sequence[int], large: Sequence[int]) -> np.ndarray:
    settings = np.arange(1 << n)
    small_idx = sum(((settings >> p) & 1) << k for k, p in enumerate(small))
    large_idx = sum(((settings >> p) & 1) << k for k, p in enumerate(large))
    mat = np.zeros((1 << len(small), 1 << len(large)), dtype=dense.dtype)
    mat[small_idx, large_idx] = dense
    return mat


def hybrid_max(e: BellExpression, *, max_block: int = HYBRID_MAX_BLOCK) -> HybridResult:
    """Maximum when each block of a bipartition may correlate arbitrarily inside.

    Across the cut the blocks act locally, so for a fixed sign function ``a``
    on the smaller block the larger block's best response gives
    ``sum_t |sum_s c(s, t) a(s)|``.  Exact; the smaller block must have at
    most ``max_block`` parties for every bipartition.
    """
    n = e.n
    if n < 2:
        raise BoundsError("a bipartition needs at least two parties")
    if n // 2 > max_block:
        raise BoundsError(f"exact hybrid search needs n <= {2 * max_block + 1}, got {n}")
    dense, exponent = e.dense()
    signs = {k: _sign_matrix(k) for k in range(1, max_block + 1)}
    best_value, best_cut = None, None
    for cut in bipartitions(n):
        small, large = (cut.a, cut.b) if len(cut.a) <= len(cut.b) else (cut.b, cut.a)
        mat = _block_matrix(dense, n, small, large)
        value = int(np.abs(signs[len(small)] @ mat).sum(axis=1).max())
        if best_value is None or value > best_value:
            best_value, best_cut = value, cut
    return HybridResult(Fraction(best_value, 1 << exponent), best_cut)


def block_product_correlations(n: int, block: Sequence[int], block_corr: Sequence, outsider: DeterministicStrategy) -> list:
    """Correlations of a block sharing some box while the other parties play deterministically.

    ``block_corr`` is indexed by the block's own setting mask (bit ``k`` for
    ``block[k]``); ``outsider`` lists signs for the remaining parties in order.
    """
    rest = [p for p in range(n) if p not in block]
    out = []
    for s in range(1 << n):
        sb = sum(((s >> p) & 1) << k for k, p in enumerate(block))
        so = sum(((s >> p) & 1) << k for k, p in enumerate(rest))
        out.append(block_corr[sb] * outsider.correlation(so))
    return out


# ---------------------------------------------------------------------------
# GHZ quantum model
# ---------------------------------------------------------------------------


def ghz_value(e: BellExpression, theta: np.ndarray) -> float:
    return float(e.coefficients() @ np.cos(phase_matrix(e.n) @ np.asarray(theta, dtype=float)))


def ghz_gradient(e: BellExpression, theta: np.ndarray) -> np.ndarray:
    mat = phase_matrix(e.n)
    return -(mat.T @ (e.coefficients() * np.sin(mat @ np.asarray(theta, dtype=float))))


def _ascend(coeff: np.ndarray, mat: np.ndarray, theta: np.ndarray, tol: float, max_iter: int):
    """Backtracking gradient ascent, finished by Newton steps once close.

    Near the optimum the Armijo gain drops below float resolution of the value,
    so there steps are judged by the gradient norm instead.  The Hessian has
    a null space (angle shifts that leave every phase sum unchanged), hence
    the pseudo-inverse.
    """
    eps = np.finfo(float).eps

    def value_grad(th):
        phase = mat @ th
        return coeff @ np.cos(phase), -(mat.T @ (coeff * np.sin(phase)))

    value, grad = value_grad(theta)
    step = 1.0
    for it in range(1, max_iter + 1):
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) < tol:
            return theta, value, True, it - 1
        noise = 8 * eps * max(1.0, abs(value))
        if gnorm2 < 1e-6:
            hess = -(mat.T * (coeff * np.cos(mat @ theta))) @ mat
            cand = theta - np.linalg.pinv(hess, rcond=1e-10, hermitian=True) @ grad
            cval, cgrad = value_grad(cand)
            if cval >= value - noise and cgrad @ cgrad < gnorm2:
                theta, value, grad = cand, cval, cgrad
                continue
        while True:
            cand = theta + step * grad
            cval, cgrad = value_grad(cand)
            if cval >= value + 1e-4 * step * gnorm2:
                break
            if step * gnorm2 < noise and cval >= value - noise and cgrad @ cgrad < gnorm2:
                break
            step *= 0.5
            if step < 1e-16:
                return theta, value, False, it
        theta, value, grad = cand, cval, cgrad
        step *= 2.0
    return theta, value, math.sqrt(float(grad @ grad)) < tol, max_iter


def ghz_max(e: BellExpression, config: GhzConfig = GhzConfig()) -> GhzResult:
    """Best GHZ value ``sum_s c(s) cos(sum_i theta_i(s_i))`` over random multistarts.

    Returns the best iterate found; ``converged`` reports whether that run
    met the gradient-norm tolerance, measured on the expression divided by
    its total weight.
    """
    # ascend on the weight-normalized expression so the search path does not depend on scale
    weight = float(algebraic_max(e)) or 1.0
    coeff = e.coefficients() / weight
    mat = phase_matrix(e.n)
    rng = RngStream(resolve_seed(config.seed), stream=0x6768_7a00 + e.n).generator()
    best = None
    for _ in range(config.multistarts):
        start = rng.uniform(0.0, 2 * math.pi, size=2 * e.n)
        theta, value, ok, iters = _ascend(coeff, mat, start, config.tol, config.max_iter)
        # ties within rounding prefer a converged run
        if best is None or value > best[1] + 1e-12 or (ok and not best[2] and value >= best[1] - 1e-12):
            best = (theta, value, ok, iters)
    theta, _, ok, iters = best
    return GhzResult(ghz_value(e, theta), GhzStrategy.from_vector(theta), ok, iters)


# ---------------------------------------------------------------------------
# Probabilities and reports
# ---------------------------------------------------------------------------


def sim_probability(v: Union[Fraction, float], n: int, total_weight: Union[Fraction, float]):
    """Success probability ``(1 + v / W) / 2`` of simulating the box whose expression has weight ``W``."""
    if total_weight <= 0:
        raise BoundsError("total weight must be positive")
    slack = 0 if isinstance(v, (int, Fraction)) and isinstance(total_weight, (int, Fraction)) else 1e-12 * float(total_weight)
    if abs(v) > total_weight + slack:
        raise BoundsError(f"Bell value {v} exceeds the total weight {total_weight} (n={n})")
    if isinstance(v, (int, Fraction)) and isinstance(total_weight, (int, Fraction)):
        return (1 + Fraction(v) / Fraction(total_weight)) / 2
    return 0.5 * (1.0 + float(v) / float(total_weight))


@dataclass
class BoundReport:
    n: int
    algebraic: Fraction
    lhv: Optional[LhvResult] = None
    hybrid: Optional[HybridResult] = None
    quantum: Optional[GhzResult] = None
    probabilities: dict = field(default_factory=dict)

    def values(self) -> dict:
        out = {}
        if self.lhv is not None:
            out["lhv"] = self.lhv.value
        if self.hybrid is not None:
            out["hybrid"] = self.hybrid.value
        if self.quantum is not None:
            out["quantum"] = self.quantum.value
        out["algebraic"] = self.algebraic
        return out

    def check_ordering(self) -> None:
        vals = [v for _, v in sorted(self.values().items(), key=lambda kv: ALL_BOUNDS.index(kv[0]))]
        for lo, hi in zip(vals, vals[1:]):
            if float(lo) > float(hi) + 1e-9:
                raise BoundsError(f"bound ordering violated: {self.values()}")

    def to_dict(self) -> dict:
        out: dict = {"n": self.n, "expression": "svetlichny", "bounds": {}}
        for name, value in self.values().items():
            entry: dict = {"value": _num(value), "probability": _num(self.probabilities[name])}
            if name == "lhv":
                entry["witness"] = {"index": self.lhv.strategy.index, "signs": [list(p) for p in self.lhv.strategy.signs]}
            elif name == "hybrid":
                entry["witness"] = str(self.hybrid.bipartition)
            elif name == "quantum":
                entry["witness"] = [[_num(a), _num(b)] for a, b in self.quantum.strategy.angles]
                entry["converged"] = self.quantum.converged
                entry["note"] = "achieved (lower bound certificate)"
            out["bounds"][name] = entry
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def to_table(self) -> str:
        lines = [f"{'bound':<10} {'value':>22} {'probability':>22}  witness"]
        for name, value in self.values().items():
            witness = ""
            if name == "lhv":
                witness = f"strategy #{self.lhv.strategy.index}"
            elif name == "hybrid":
                witness = f"cut {self.hybrid.bipartition}"
            elif name == "quantum":
                witness = "achieved (lower bound certificate)"
            lines.append(f"{name:<10} {_num(value):>22} {_num(self.probabilities[name]):>22}  {witness}")
        return "\n".join(lines)


def _num(x) -> Union[str, float, int]:
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"
    return float(f"{float(x):.12g}")


def bound_report(n: int, which: Sequence[str] = ALL_BOUNDS, config: GhzConfig = GhzConfig()) -> BoundReport:
    """Every requested bound of ``svetlichny(n)`` plus the matching simulation probabilities."""
    unknown = set(which) - set(ALL_BOUNDS)
    if unknown:
        raise BoundsError(f"unknown bound names {sorted(unknown)}")
    e = svetlichny(n)
    weight = algebraic_max(e)
    report = BoundReport(n, weight)
    if "lhv" in which:
        report.lhv = lhv_max(e)
    if "hybrid" in which:
        report.hybrid = hybrid_max(e)
    if "quantum" in which:
        report.quantum = ghz_max(e, config)
    for name, value in report.values().items():
        report.probabilities[name] = sim_probability(value, n, weight)
    report.check_ordering()
    return report


__all__ = [
    "ALL_BOUNDS",
    "Bipartition",
    "BoundReport",
    "BoundsError",
    "GhzConfig",
    "GhzResult",
    "HybridResult",
    "LhvResult",
    "bipartitions",
    "block_product_correlations",
    "bound_report",
    "ghz_gradient",
    "ghz_max",
    "ghz_value",
    "hybrid_max",
    "lhv_max",
    "lhv_value",
    "sim_probability",
]
