"""Generalized Bell expressions with two observables per party.

A setting is an integer bitmask over ``n`` parties: bit ``i`` clear means
party ``i`` measures ``x``, bit set means ``y``.  The string form lists
parties left to right, so ``"xxy"`` is setting ``0b100``.

Coefficients are exact :class:`fractions.Fraction` values whose
denominators are powers of two.  Floating point never enters the algebra
here; it only appears once correlations from a physical model are plugged
into :func:`evaluate`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "BellExpression",
    "InequalityError",
    "MissingSetting",
    "UnequalMagnitudes",
    "DEFAULT_MAX_PARTIES",
    "algebraic_max",
    "dyadic_parts",
    "evaluate",
    "klyshko",
    "prime",
    "setting_from_str",
    "setting_to_str",
    "svetlichny",
    "unit_form",
]

DEFAULT_MAX_PARTIES = 16

Number = Union[int, float, Fraction]


class InequalityError(ValueError):
    """Base class for malformed Bell expressions or arguments."""


class UnequalMagnitudes(InequalityError):
    pass


class MissingSetting(InequalityError, KeyError):
    pass


def setting_to_str(setting: int, n: int) -> str:
    return "".join("y" if (setting >> i) & 1 else "x" for i in range(n))


def setting_from_str(text: str) -> int:
    value = 0
    for i, ch in enumerate(text):
        if ch == "y":
            value |= 1 << i
        elif ch != "x":
            raise InequalityError(f"setting string {text!r} must use only 'x'/'y'")
    return value


def dyadic_parts(value: Fraction) -> tuple[int, int]:
    """Return ``(numerator, exponent)`` with ``value == numerator / 2**exponent``.

    Canonical: the numerator is odd, or zero with exponent zero.
    """
    value = Fraction(value)
    if value == 0:
        return 0, 0
    den = value.denominator
    if den & (den - 1):
        raise InequalityError(f"{value} is not a dyadic rational")
    return value.numerator, den.bit_length() - 1


def _check_n(n: int, max_parties: int) -> None:
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise InequalityError(f"party count must be an integer >= 2, got {n!r}")
    if n > max_parties:
        raise InequalityError(f"party count {n} exceeds the cap of {max_parties}")


@dataclass(frozen=True)
class BellExpression:
    """Signed linear combination of correlation functions ``C(s)``.

    ``terms`` maps setting bitmask to a nonzero dyadic coefficient.  Zero
    coefficients passed at construction are dropped.
    """

    n: int
    terms: Mapping[int, Fraction] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise InequalityError("expression needs at least one party")
        clean: dict[int, Fraction] = {}
        limit = 1 << self.n
        for setting, coeff in self.terms.items():
            setting = int(setting)
            if not 0 <= setting < limit:
                raise InequalityError(f"setting {setting} out of range for n={self.n}")
            coeff = Fraction(coeff)
            dyadic_parts(coeff)
            if coeff:
                clean[setting] = coeff
        object.__setattr__(self, "terms", MappingProxyType(dict(sorted(clean.items()))))

    def __hash__(self) -> int:
        return hash((self.n, tuple(self.terms.items())))

    # -- construction ---------------------------------------------------

    @classmethod
    def from_dense(cls, n: int, numerators: Sequence[int], exponent: int = 0) -> "BellExpression":
        scale = Fraction(1, 1 << exponent)
        return cls(n, {s: int(c) * scale for s, c in enumerate(numerators) if c})

    @classmethod
    def from_strings(cls, pairs: Mapping[str, Number]) -> "BellExpression":
        lengths = {len(k) for k in pairs}
        if len(lengths) != 1:
            raise InequalityError("all setting strings must have the same length")
        (n,) = lengths
        return cls(n, {setting_from_str(k): Fraction(v) for k, v in pairs.items()})

    # -- views ----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.terms)

    def __getitem__(self, setting: Union[int, str]) -> Fraction:
        if isinstance(setting, str):
            setting = setting_from_str(setting)
        return self.terms.get(setting, Fraction(0))

    def dense(self) -> tuple[np.ndarray, int]:
        """Integer numerators over all ``2**n`` settings and their shared exponent."""
        exponent = max((dyadic_parts(c)[1] for c in self.terms.values()), default=0)
        out = np.zeros(1 << self.n, dtype=np.int64)
        for s, c in self.terms.items():
            out[s] = int(c * (1 << exponent))
        return out, exponent

    def coefficients(self) -> np.ndarray:
        """Float coefficients over all settings, for numerical work."""
        out = np.zeros(1 << self.n)
        for s, c in self.terms.items():
            out[s] = float(c)
        return out

    def by_string(self) -> dict[str, Fraction]:
        return {setting_to_str(s, self.n): c for s, c in self.terms.items()}

    # -- algebra --------------------------------------------------------

    def _combine(self, other: "BellExpression", sign: int) -> "BellExpression":
        if other.n != self.n:
            raise InequalityError("cannot combine expressions over different party counts")
        out = dict(self.terms)
        for s, c in other.terms.items():
            out[s] = out.get(s, Fraction(0)) + sign * c
        return BellExpression(self.n, out)

    def __add__(self, other: "BellExpression") -> "BellExpression":
        return self._combine(other, 1)

    def __sub__(self, other: "BellExpression") -> "BellExpression":
        return self._combine(other, -1)

    def __neg__(self) -> "BellExpression":
        return self.scaled(-1)

    def scaled(self, factor: Number) -> "BellExpression":
        factor = Fraction(factor)
        return BellExpression(self.n, {s: c * factor for s, c in self.terms.items()})

    def __mul__(self, factor: Number) -> "BellExpression":
        return self.scaled(factor)

    __rmul__ = __mul__

    def tensor(self, other: "BellExpression") -> "BellExpression":
        """Append ``other``'s parties after this expression's parties."""
        out: dict[int, Fraction] = {}
        for s, c in self.terms.items():
            for t, d in other.terms.items():
                out[s | (t << self.n)] = c * d
        return BellExpression(self.n + other.n, out)

    # -- text / json ----------------------------------------------------

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for label, c in sorted(self.by_string().items()):
            sign = "-" if c < 0 else "+"
            mag = abs(c)
            body = label if mag == 1 else f"{mag}*{label}"
            parts.append(f"{sign}{body}")
        text = "".join(parts)
        return text[1:] if text.startswith("+") else text

    def to_dict(self) -> dict:
        rows = []
        for label, c in sorted(self.by_string().items()):
            num, exp = dyadic_parts(c)
            rows.append({"setting": label, "num": num, "exp": exp})
        return {"n": self.n, "terms": rows}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: Mapping) -> "BellExpression":
        n = int(data["n"])
        terms: dict[int, Fraction] = {}
        for row in data["terms"]:
            label = row["setting"]
            if len(label) != n:
                raise InequalityError(f"setting {label!r} does not have {n} parties")
            terms[setting_from_str(label)] = Fraction(int(row["num"]), 1 << int(row["exp"]))
        return cls(n, terms)

    @classmethod
    def from_json(cls, text: str) -> "BellExpression":
        return cls.from_dict(json.loads(text))


def prime(e: BellExpression) -> BellExpression:
    """Exchange ``x`` and ``y`` for every party."""
    mask = (1 << e.n) - 1
    return BellExpression(e.n, {s ^ mask: c for s, c in e.terms.items()})


def _klyshko_dense(n: int) -> tuple[np.ndarray, int]:
    # A' is A read at the complemented setting, i.e. the reversed dense vector.
    # Party k's bit is the high bit of the new vector, so its x-half comes first.
    vec = np.array([1, 1, 1, -1], dtype=object)
    exponent = 0
    for _ in range(3, n + 1):
        flipped = vec[::-1]
        vec = np.concatenate([vec + flipped, vec - flipped])
        exponent += 1
    return vec, exponent


def klyshko(n: int, *, max_parties: int = DEFAULT_MAX_PARTIES) -> BellExpression:
    """The recursively built ``n``-party Klyshko expression ``A_n``.

    ``A_n = 1/2 A_{n-1} (x + y) + 1/2 A'_{n-1} (x - y)`` starting from CHSH.
    """
    _check_n(n, max_parties)
    vec, exponent = _klyshko_dense(n)
    return BellExpression.from_dense(n, vec, exponent)


def svetlichny(n: int, *, max_parties: int = DEFAULT_MAX_PARTIES) -> BellExpression:
    """Generalized Svetlichny expression ``S_n``.

    Equal to ``A_n`` for even ``n``; for odd ``n`` it is ``(A_n + A'_n)/2``
    when ``n = 1 mod 4`` and ``(A_n - A'_n)/2`` when ``n = 3 mod 4``.
    """
    a = klyshko(n, max_parties=max_parties)
    if n % 2 == 0:
        return a
    a_prime = prime(a)
    combined = a + a_prime if n % 4 == 1 else a - a_prime
    return combined.scaled(Fraction(1, 2))


def unit_form(e: BellExpression) -> tuple[BellExpression, Fraction]:
    """Rescale ``e`` to +-1 coefficients; returns ``(unit, scale)`` with ``scale * unit == e``."""
    magnitudes = {abs(c) for c in e.terms.values()}
    if len(magnitudes) > 1:
        raise UnequalMagnitudes(f"coefficients have {len(magnitudes)} distinct magnitudes")
    if not magnitudes:
        return e, Fraction(1)
    (scale,) = magnitudes
    return e.scaled(1 / scale), scale


def algebraic_max(e: BellExpression) -> Fraction:
    """Sum of absolute coefficients: the value reached when every correlation matches its sign."""
    return sum((abs(c) for c in e.terms.values()), Fraction(0))


def evaluate(e: BellExpression, correlations: Union[Mapping[int, Number], Sequence[Number]]):
    """Value of ``e`` at the given correlations.

    ``correlations`` is either a mapping from setting to value or a dense
    sequence indexed by setting.  Exact inputs give an exact result.
    """
    total = Fraction(0)
    exact = True
    fsum = 0.0
    for s, c in e.terms.items():
        try:
            value = correlations[s]
        except (KeyError, IndexError):
            raise MissingSetting(f"no correlation for setting {setting_to_str(s, e.n)}") from None
        if isinstance(value, (int, np.integer, Fraction)) and exact:
            total += c * Fraction(int(value) if isinstance(value, np.integer) else value)
        else:
            if exact:
                fsum = float(total)
                exact = False
            fsum += float(c) * float(value)
    return total if exact else fsum

