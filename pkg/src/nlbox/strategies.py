"""Local strategy families: deterministic sign assignments and GHZ measurement angles."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2 * math.pi


@dataclass(frozen=True)
class DeterministicStrategy:
    """Predetermined +-1 outcome for each party's ``x`` and ``y`` observable.

    ``signs[i] == (e_x, e_y)``.  The integer ``index`` packs the strategy as
    ``2n`` bits: bit ``2i`` is set when ``e_x(i) == -1`` and bit ``2i+1``
    when ``e_y(i) == -1``.
    """

    signs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        for pair in self.signs:
            if len(pair) != 2 or any(v not in (1, -1) for v in pair):
                raise ValueError(f"strategy entries must be pairs of +-1, got {pair!r}")
        object.__setattr__(self, "signs", tuple(tuple(int(v) for v in p) for p in self.signs))

    @property
    def n(self) -> int:
        return len(self.signs)

    @property
    def index(self) -> int:
        value = 0
        for i, (ex, ey) in enumerate(self.signs):
            value |= (ex < 0) << (2 * i) | (ey < 0) << (2 * i + 1)
        return value

    @classmethod
    def from_index(cls, index: int, n: int) -> "DeterministicStrategy":
        if not 0 <= index < 4**n:
            raise ValueError(f"strategy index {index} out of range for n={n}")
        return cls(tuple(
            (-1 if (index >> 2 * i) & 1 else 1, -1 if (index >> (2 * i + 1)) & 1 else 1)
            for i in range(n)
        ))

    def outcome(self, party: int, observable: int) -> int:
        return self.signs[party][observable]

    def correlation(self, setting: int) -> int:
        value = 1
        for i, pair in enumerate(self.signs):
            value *= pair[(setting >> i) & 1]
        return value


@dataclass(frozen=True)
class GhzStrategy:
    """Equatorial measurement angles on an ``n``-party GHZ state.

    ``angles[i] == (theta_x, theta_y)``, stored modulo 2 pi.  The correlation
    at a setting is ``cos`` of the summed angles the parties select.
    """

    angles: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        clean = []
        for pair in self.angles:
            if len(pair) != 2 or not all(math.isfinite(a) for a in pair):
                raise ValueError(f"angles must be finite pairs, got {pair!r}")
            clean.append(tuple(float(a) % TWO_PI for a in pair))
        object.__setattr__(self, "angles", tuple(clean))

    @property
    def n(self) -> int:
        return len(self.angles)

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "GhzStrategy":
        theta = np.asarray(theta, dtype=float).reshape(-1, 2)
        return cls(tuple((float(a), float(b)) for a, b in theta))

    def vector(self) -> np.ndarray:
        return np.array(self.angles, dtype=float).reshape(-1)

    def phase(self, setting: int) -> float:
        return sum(pair[(setting >> i) & 1] for i, pair in enumerate(self.angles))

    def correlations(self) -> np.ndarray:
        return np.cos(phase_matrix(self.n) @ self.vector())


def phase_matrix(n: int) -> np.ndarray:
    """0/1 matrix ``S`` with ``(S @ theta)[s]`` the summed angle at setting ``s``.

    ``theta`` is laid out as ``[theta_x(0), theta_y(0), theta_x(1), ...]``.
    """
    settings = np.arange(1 << n)
    out = np.zeros((1 << n, 2 * n))
    for i in range(n):
        bit = (settings >> i) & 1
        out[settings, 2 * i + bit] = 1.0
    return out
