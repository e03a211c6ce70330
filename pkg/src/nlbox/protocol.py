"""Distributed communication-complexity protocols built from nonlocal boxes.

Each party runs a *program*: a generator that only sees its own
:class:`PartyState` (private inputs, a cursor on the shared random tape, a
cursor on its private tape).  Whenever it needs boxes it yields a list of
``(device_id, input_bits)`` requests and receives its own output bits back.
:func:`execute` steps parties in index order and fires a box once every
attached party has submitted, so box calls are the only synchronization
points and no message ever passes between parties.

All bit values are ``uint8`` numpy arrays with one entry per trial, which
lets a whole batch of independent trials run through the same program.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Any, Callable, Generator, Hashable, Iterable, Optional, Sequence

import numpy as np

from .boxes import (
    BoxBehavior,
    box_to_bell,
    ghz_box,
    lhv_strategy_box,
    noisy_box,
    perfect_box,
    sample_many,
    svetlichny_box,
)
from .bounds import GhzConfig, ghz_max, lhv_max
from .rng import RngStream, resolve_seed

Bits = np.ndarray
Request = tuple[Hashable, Bits]
Program = Generator[list[Request], list[Bits], Bits]

FIVE_SIXTHS = 5 / 6
DEFAULT_BATCH = 1 << 14
DEFAULT_ROUND_CAP = 64


class ProtocolError(RuntimeError):
    pass


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Randomness tapes
# ---------------------------------------------------------------------------


class BitTape:
    """Append-only rows of uniform bits (one row = one bit per trial)."""

    def __init__(self, batch: int, rng: Optional[np.random.Generator] = None, fixed: Optional[np.ndarray] = None):
        self.batch = batch
        self._rng = rng
        self._rows: list[np.ndarray] = []
        if fixed is not None:
            fixed = np.asarray(fixed, dtype=np.uint8).reshape(-1, batch)
            self._rows.extend(fixed)

    def _ensure(self, count: int) -> None:
        missing = count - len(self._rows)
        if missing <= 0:
            return
        if self._rng is None:
            raise ProtocolError("fixed random tape exhausted")
        self._rows.extend(self._rng.integers(0, 2, size=(max(missing, 8), self.batch), dtype=np.uint8))

    def cursor(self) -> "BitCursor":
        return BitCursor(self)


class BitCursor:
    """Independent read position on a :class:`BitTape`; logs what it hands out."""

    def __init__(self, tape: BitTape):
        self._tape = tape
        self._pos = 0
        self.log: list[np.ndarray] = []

    def bits(self, k: int) -> np.ndarray:
        self._tape._ensure(self._pos + k)
        rows = np.array(self._tape._rows[self._pos:self._pos + k], dtype=np.uint8).reshape(k, self._tape.batch)
        self._pos += k
        self.log.append(rows)
        return rows

    def consumed(self) -> np.ndarray:
        if not self.log:
            return np.zeros((0, self._tape.batch), dtype=np.uint8)
        return np.concatenate(self.log, axis=0)


class SharedRandomness:
    """A tape every party reads in the same order, so all parties see the same bits."""

    def __init__(self, batch: int, stream: Optional[RngStream] = None, fixed: Optional[np.ndarray] = None):
        rng = stream.generator() if stream is not None else None
        if rng is None and fixed is None:
            raise ProtocolError("shared randomness needs a stream or a fixed tape")
        self.tape = BitTape(batch, rng, fixed)

    def view(self) -> BitCursor:
        return self.tape.cursor()


# ---------------------------------------------------------------------------
# Parties, devices, and the executor
# ---------------------------------------------------------------------------


@dataclass
class PartyState:
    """Everything a party may touch: its own inputs and its own randomness handles."""

    index: int
    n: int
    inputs: Any
    shared: BitCursor
    private: BitCursor
    share: Optional[Bits] = None


class BoxDevice:
    """One use of a nonlocal box attached to ``parties`` (bit ``k`` of the box is ``parties[k]``)."""

    def __init__(self, behavior: BoxBehavior, parties: Sequence[int], rng: np.random.Generator):
        if behavior.n != len(parties):
            raise ProtocolError(f"box arity {behavior.n} does not match {len(parties)} attached parties")
        self.behavior = behavior
        self.parties = tuple(parties)
        self._rng = rng

    def fire(self, inputs: dict[int, Bits]) -> dict[int, Bits]:
        if set(inputs) != set(self.parties):
            missing = sorted(set(self.parties) - set(inputs))
            raise ProtocolError(f"box fired without inputs from parties {missing}")
        z = np.zeros(len(inputs[self.parties[0]]), dtype=np.int64)
        for k, p in enumerate(self.parties):
            z |= inputs[p].astype(np.int64) << k
        out = sample_many(self.behavior, z, self._rng)
        return {p: ((out >> k) & 1).astype(np.uint8) for k, p in enumerate(self.parties)}


DeviceFactory = Callable[[Hashable], tuple[BoxBehavior, Sequence[int]]]


@dataclass
class PartyTranscript:
    requests: list[list[Request]] = field(default_factory=list)
    outputs: list[list[Bits]] = field(default_factory=list)
    shared: Optional[np.ndarray] = None
    private: Optional[np.ndarray] = None
    share: Optional[Bits] = None


def execute(
    programs: Sequence[Program],
    devices: DeviceFactory,
    rng: np.random.Generator,
    states: Optional[Sequence[PartyState]] = None,
) -> tuple[list[Bits], list[PartyTranscript]]:
    """Run party programs to completion; return their shares and what each party saw."""
    n = len(programs)
    transcripts = [PartyTranscript() for _ in range(n)]
    pending: list[Optional[list[Request]]] = [None] * n
    done = [False] * n
    shares: list[Optional[Bits]] = [None] * n

    def advance(i: int, reply: Optional[list[Bits]]) -> None:
        try:
            req = programs[i].send(reply) if reply is not None else next(programs[i])
            pending[i] = list(req)
            transcripts[i].requests.append(pending[i])
        except StopIteration as stop:
            done[i] = True
            pending[i] = None
            shares[i] = np.asarray(stop.value, dtype=np.uint8)

    for i in range(n):
        advance(i, None)
    while not all(done):
        gathered: dict[Hashable, dict[int, Bits]] = {}
        order: list[Hashable] = []
        for i in range(n):
            for dev_id, bits in pending[i] or ():
                if dev_id not in gathered:
                    gathered[dev_id] = {}
                    order.append(dev_id)
                if i in gathered[dev_id]:
                    raise ProtocolError(f"party {i} used device {dev_id!r} twice")
                gathered[dev_id][i] = np.asarray(bits, dtype=np.uint8)
        if not order:
            raise ProtocolError("parties finished out of step")
        results: dict[Hashable, dict[int, Bits]] = {}
        for dev_id in order:
            behavior, parties = devices(dev_id)
            results[dev_id] = BoxDevice(behavior, parties, rng).fire(gathered[dev_id])
        for i in range(n):
            if done[i]:
                continue
            reply = [results[dev_id][i] for dev_id, _ in pending[i]]
            transcripts[i].outputs.append(reply)
            advance(i, reply)
    if states is not None:
        for st, tr, sh in zip(states, transcripts, shares):
            st.share = sh
            tr.shared = st.shared.consumed()
            tr.private = st.private.consumed()
            tr.share = sh
    return shares, transcripts


def audit_party(make_program: Callable[[PartyState], Program], index: int, n: int, inputs: Any,
                transcript: PartyTranscript, batch: int) -> bool:
    """Replay one party from its own view alone; true when it reproduces the same behaviour.

    The replay has only that party's inputs, the shared bits it read, its
    private bits and its recorded box outputs, so agreement shows its share
    depends on nothing else.
    """
    state = PartyState(
        index, n, inputs,
        BitTape(batch, fixed=transcript.shared).cursor(),
        BitTape(batch, fixed=transcript.private).cursor(),
    )
    program = make_program(state)
    try:
        req = next(program)
        for recorded_req, recorded_out in zip(transcript.requests, transcript.outputs):
            if [d for d, _ in req] != [d for d, _ in recorded_req]:
                return False
            if not all(np.array_equal(a, b) for (_, a), (_, b) in zip(req, recorded_req)):
                return False
            req = program.send(recorded_out)
        return False
    except StopIteration as stop:
        return np.array_equal(np.asarray(stop.value, dtype=np.uint8), transcript.share)
    except ProtocolError:
        return False


# ---------------------------------------------------------------------------
# Party programs
# ---------------------------------------------------------------------------


def _xor_rows(rows: Iterable[Bits], batch: int) -> Bits:
    acc = np.zeros(batch, dtype=np.uint8)
    for r in rows:
        acc ^= r
    return acc


def _no_boxes() -> Generator[list[Request], list[Bits], None]:
    return
    yield  # pragma: no cover


def base_program(state: PartyState, f: Callable[[list[Bits]], Bits], sizes: Sequence[int]) -> Program:
    """Shared-randomness protocol with XOR-correctness exactly ``1/2 + 2**-(M+1)``.

    The shared tape supplies a guess of the whole input and an XOR-sharing of
    ``f(guess)``.  A party whose real input matches its part of the guess
    emits its share; otherwise it masks the share with a private coin.
    ``state.inputs`` is this party's ``(sizes[i], batch)`` bit array.
    """
    yield from _no_boxes()
    n, i = state.n, state.index
    total = sum(sizes)
    guess = state.shared.bits(total)
    mask_bits = state.shared.bits(n - 1)
    batch = guess.shape[1]
    offsets = np.cumsum([0, *sizes])
    parts = [guess[offsets[k]:offsets[k + 1]] for k in range(n)]
    fhat = np.asarray(f(parts), dtype=np.uint8)
    if i < n - 1:
        share = mask_bits[i]
    else:
        share = fhat ^ _xor_rows(mask_bits, batch)
    mine = parts[i]
    own = np.asarray(state.inputs, dtype=np.uint8).reshape(sizes[i], batch)
    match = np.all(own == mine, axis=0)
    coin = state.private.bits(1)[0]
    return share ^ (coin & (~match).astype(np.uint8))


def equality_program(state: PartyState, triple: Sequence[Bits], boxes: Sequence[Hashable]) -> Program:
    """Three-box nonlocal equality; the XOR of all shares is ``[z1 = z2] and [z2 = z3]``."""
    x1, x2, x3 = (np.asarray(t, dtype=np.uint8) for t in triple)
    last = np.uint8(state.index == state.n - 1)
    xp = x1 ^ x2 ^ last
    xpp = x2 ^ x3 ^ last
    o1, o2, o3 = yield [(boxes[0], xp), (boxes[1], xpp), (boxes[2], xp ^ xpp)]
    return (xp & xpp) ^ o1 ^ o2 ^ o3


def bipartite_equality_program(state: PartyState, triple: Sequence[Bits], tag: Hashable) -> Program:
    """Nonlocal equality from ``n(n-1)`` two-party boxes, one per ordered pair ``(i, j)``.

    Box ``(i, j)`` takes ``x'_i`` from party ``i`` and ``x''_j`` from party ``j``.
    """
    x1, x2, x3 = (np.asarray(t, dtype=np.uint8) for t in triple)
    me, n = state.index, state.n
    last = np.uint8(me == n - 1)
    xp = x1 ^ x2 ^ last
    xpp = x2 ^ x3 ^ last
    requests = []
    for i in range(n):
        for j in range(n):
            if i != j and me in (i, j):
                requests.append(((tag, i, j), xp if me == i else xpp))
    outs = yield requests
    share = xp & xpp
    for o in outs:
        share = share ^ o
    return share


def majority_from_equality(index: int, triple: Sequence[Bits], eq_share: Bits) -> Bits:
    """Local step turning an equality share into a majority share.

    Party 0 negates its share and everyone adds its three input bits, so the
    XOR over parties is ``not Eq xor z1 xor z2 xor z3 = Maj(z1, z2, z3)``.
    """
    x1, x2, x3 = (np.asarray(t, dtype=np.uint8) for t in triple)
    share = np.asarray(eq_share, dtype=np.uint8) ^ x1 ^ x2 ^ x3
    if index == 0:
        share = share ^ np.uint8(1)
    return share


def majority_program(state: PartyState, triple: Sequence[Bits], boxes: Sequence[Hashable], bipartite: bool = False) -> Program:
    if bipartite:
        eq = yield from bipartite_equality_program(state, triple, boxes[0])
    else:
        eq = yield from equality_program(state, triple, boxes)
    return majority_from_equality(state.index, triple, eq)


def boosted_program(state: PartyState, depth: int, leaf: Callable[[PartyState, tuple], Program],
                    path: tuple = (), bipartite: bool = False) -> Program:
    """Three independent depth-``depth - 1`` runs combined by nonlocal majority."""
    if depth == 0:
        return (yield from leaf(state, path))
    triple = []
    for k in range(3):
        share = yield from boosted_program(state, depth - 1, leaf, path + (k,), bipartite)
        triple.append(share)
    if bipartite:
        boxes = [("eq2", path)]
    else:
        boxes = [("eq", path, k) for k in range(3)]
    return (yield from majority_program(state, triple, boxes, bipartite))


# ---------------------------------------------------------------------------
# Convenience wrappers (single batch, explicit tapes)
# ---------------------------------------------------------------------------


def _states(n: int, inputs: Sequence[Any], shared: SharedRandomness, private_tapes: Sequence[BitTape]) -> list[PartyState]:
    return [PartyState(i, n, inputs[i], shared.view(), private_tapes[i].cursor()) for i in range(n)]


def _multipartite_factory(behavior: BoxBehavior) -> DeviceFactory:
    parties = tuple(range(behavior.n))
    return lambda dev_id: (behavior, parties)


def _bipartite_factory(behavior: BoxBehavior) -> DeviceFactory:
    def factory(dev_id):
        _, i, j = dev_id
        return behavior, (i, j)
    return factory


def _no_devices(dev_id):
    raise ProtocolError(f"protocol requested box {dev_id!r} but none are available")


def base_protocol(f: Callable[[list[Bits]], Bits], inputs: Sequence[np.ndarray], shared: SharedRandomness,
                  private: Sequence[BitTape]) -> list[Bits]:
    """Shares of the shared-randomness protocol; ``inputs[i]`` is party ``i``'s ``(m_i, batch)`` array."""
    n = len(inputs)
    sizes = [np.asarray(x).shape[0] for x in inputs]
    states = _states(n, inputs, shared, private)
    programs = [base_program(st, f, sizes) for st in states]
    shares, _ = execute(programs, _no_devices, None, states)
    return shares


def nonlocal_equality(n: int, triples: Sequence[Sequence[Bits]], boxes: Sequence[BoxBehavior],
                      rng: np.random.Generator) -> list[Bits]:
    """Shares of three-box equality; ``triples[i] = (x_i^1, x_i^2, x_i^3)``."""
    if len(boxes) != 3 or any(b.n != n for b in boxes):
        raise ProtocolError(f"nonlocal equality needs three {n}-party boxes")
    batch = len(np.atleast_1d(triples[0][0]))
    dummy = SharedRandomness(batch, fixed=np.zeros((0, batch)))
    states = _states(n, [None] * n, dummy, [BitTape(batch, fixed=np.zeros((0, batch))) for _ in range(n)])
    ids = [("eq", (), k) for k in range(3)]
    table = dict(zip(ids, boxes))
    parties = tuple(range(n))
    programs = [equality_program(st, [np.atleast_1d(np.asarray(t, dtype=np.uint8)) for t in triples[i]], ids)
                for i, st in enumerate(states)]
    shares, _ = execute(programs, lambda d: (table[d], parties), rng)
    return shares


def nonlocal_equality_bipartite(n: int, triples: Sequence[Sequence[Bits]], boxes: dict[tuple[int, int], BoxBehavior],
                                rng: np.random.Generator) -> list[Bits]:
    """Shares of equality built from one two-party box per ordered pair ``(i, j)``, ``i != j``."""
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    if sorted(boxes) != pairs or any(b.n != 2 for b in boxes.values()):
        raise ProtocolError(f"bipartite equality needs exactly {n * (n - 1)} two-party boxes, one per ordered pair")
    batch = len(np.atleast_1d(triples[0][0]))
    empty = np.zeros((0, batch))
    states = _states(n, [None] * n, SharedRandomness(batch, fixed=empty), [BitTape(batch, fixed=empty) for _ in range(n)])
    programs = [bipartite_equality_program(st, [np.atleast_1d(np.asarray(t, dtype=np.uint8)) for t in triples[i]], "eq2")
                for i, st in enumerate(states)]
    shares, _ = execute(programs, lambda d: (boxes[(d[1], d[2])], (d[1], d[2])), rng)
    return shares


def nonlocal_majority(triples: Sequence[Sequence[Bits]], equality_shares: Sequence[Bits]) -> list[Bits]:
    return [majority_from_equality(i, t, eq) for i, (t, eq) in enumerate(zip(triples, equality_shares))]


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------


def majority3(p: float) -> float:
    """Probability that the majority of three independent ``p``-correct bits is correct."""
    return p**3 + 3 * p**2 * (1 - p)


def equality_success(p: float) -> float:
    """Three noisy boxes: correct iff an even number of them fail."""
    return p**3 + 3 * p * (1 - p) ** 2


def bipartite_equality_success(n: int, p: float) -> float:
    return 0.5 * (1 + (2 * p - 1) ** (n * (n - 1)))


def base_success(total_bits: int) -> Fraction:
    return Fraction(1, 2) + Fraction(1, 2 ** (total_bits + 1))


def boost_map(p: float, q_maj: float) -> float:
    """Success after majority-of-three with a majority gadget that is right with probability ``q_maj``."""
    m = majority3(p)
    return q_maj * m + (1 - q_maj) * (1 - m)


class QTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class BoostParams:
    q_maj: float

    @property
    def delta(self) -> float:
        return self.q_maj - FIVE_SIXTHS

    @property
    def s(self) -> float:
        return fixed_point_s(self.q_maj)


def fixed_point_s(q_maj: float) -> float:
    """Upper fixed point of :func:`boost_map` in ``p`` for a majority gadget above 5/6."""
    if q_maj <= FIVE_SIXTHS:
        raise QTooSmall(f"boosting needs q > 5/6, got {q_maj}")
    delta = q_maj - FIVE_SIXTHS
    return 0.5 + 3 * math.sqrt(delta) / (2 * math.sqrt(1 + 3 * delta))


def boost_curve(p0: float, q_maj: float, rounds: Optional[int] = None, *, tol: float = 1e-9,
                round_cap: int = DEFAULT_ROUND_CAP) -> list[float]:
    """``[p0, p1, ...]`` under repeated boosting.

    With ``rounds`` given, exactly that many steps; otherwise iterate until
    successive values differ by less than ``tol`` or ``round_cap`` steps.
    """
    curve = [p0]
    limit = rounds if rounds is not None else round_cap
    for _ in range(limit):
        nxt = boost_map(curve[-1], q_maj)
        curve.append(nxt)
        if rounds is None and abs(nxt - curve[-2]) < tol:
            break
    return curve


def _bisect(fn: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12) -> float:
    flo = fn(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


class Thresholds(tuple):
    __slots__ = ()

    def __new__(cls, p2: float, p3: float):
        return super().__new__(cls, (p2, p3))

    @property
    def bipartite(self) -> float:
        return self[0]

    @property
    def multipartite(self) -> float:
        return self[1]


def bipartite_threshold() -> float:
    """Closed-form root of ``p^2 + (1-p)^2 = 5/6`` on ``[1/2, 1]``."""
    return (1 + math.sqrt(2 / 3)) / 2


def bipartite_threshold_bisection() -> float:
    return _bisect(lambda p: p * p + (1 - p) ** 2 - FIVE_SIXTHS, 0.5, 1.0)


def thresholds() -> Thresholds:
    """Minimal box reliabilities for boosting: two-box bipartite and three-box multipartite equality."""
    p3 = _bisect(lambda p: equality_success(p) - FIVE_SIXTHS, 0.5, 1.0)
    return Thresholds(bipartite_threshold(), p3)


# ---------------------------------------------------------------------------
# Scenario harness
# ---------------------------------------------------------------------------


PROTOCOLS = ("equality", "majority", "boost", "end_to_end")
BOX_KINDS = ("perfect", "noisy", "lhv", "ghz")
FUNCTIONS = ("and", "or", "parity", "inner_product")
_SCENARIO_KEYS = {"protocol", "n", "box", "trials", "seed", "rounds", "variant", "p0", "bits",
                  "function", "batch_size", "audit"}


@dataclass(frozen=True)
class Scenario:
    protocol: str
    n: int
    box_kind: str = "noisy"
    box_p: Optional[float] = None
    trials: int = 10_000
    seed: int = 0
    rounds: int = 3
    variant: str = "multipartite"
    p0: Optional[float] = None
    bits: int = 1
    function: str = "and"
    batch_size: int = DEFAULT_BATCH
    audit: bool = True

    @classmethod
    def from_dict(cls, data: dict, *, seed: Optional[int] = None) -> "Scenario":
        if not isinstance(data, dict):
            raise ScenarioError("scenario must be a JSON object")
        unknown = set(data) - _SCENARIO_KEYS
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        for key in ("protocol", "n"):
            if key not in data:
                raise ScenarioError(f"scenario is missing {key!r}")
        box = data.get("box", {"kind": "noisy", "p": 0.95})
        if not isinstance(box, dict) or "kind" not in box:
            raise ScenarioError("box must be an object with a 'kind'")
        if set(box) - {"kind", "p"}:
            raise ScenarioError(f"unknown box keys: {sorted(set(box) - {'kind', 'p'})}")
        sc_seed = data.get("seed", seed)
        try:
            scenario = cls(
                protocol=data["protocol"],
                n=int(data["n"]),
                box_kind=box["kind"],
                box_p=None if box.get("p") is None else float(box["p"]),
                trials=int(data.get("trials", 10_000)),
                seed=resolve_seed(None if sc_seed is None else int(sc_seed)),
                rounds=int(data.get("rounds", 3)),
                variant=data.get("variant", "multipartite"),
                p0=None if data.get("p0") is None else float(data["p0"]),
                bits=int(data.get("bits", 1)),
                function=data.get("function", "and"),
                batch_size=int(data.get("batch_size", DEFAULT_BATCH)),
                audit=bool(data.get("audit", True)),
            )
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from None
        scenario.validate()
        return scenario

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ScenarioError(f"protocol must be one of {PROTOCOLS}")
        if self.n < 2:
            raise ScenarioError("n must be at least 2")
        if self.box_kind not in BOX_KINDS:
            raise ScenarioError(f"box kind must be one of {BOX_KINDS}")
        if self.box_kind == "noisy" and (self.box_p is None or not 0.5 <= self.box_p <= 1):
            raise ScenarioError("noisy box needs p in [0.5, 1]")
        if self.trials < 1:
            raise ScenarioError("trials must be >= 1")
        if self.rounds < 0:
            raise ScenarioError("rounds must be >= 0")
        if self.variant not in ("multipartite", "bipartite"):
            raise ScenarioError("variant must be 'multipartite' or 'bipartite'")
        if self.protocol == "boost" and self.p0 is not None and not 0.5 <= self.p0 <= 1:
            raise ScenarioError("p0 must lie in [0.5, 1]")
        if self.bits < 1 or self.function not in FUNCTIONS:
            raise ScenarioError(f"bits must be >= 1 and function one of {FUNCTIONS}")
        if self.batch_size < 1:
            raise ScenarioError("batch_size must be >= 1")
        if self.box_kind in ("lhv", "ghz") and self.variant == "multipartite" and self.n > 10:
            raise ScenarioError("lhv/ghz boxes are searched exhaustively; n must be <= 10")

    def to_dict(self) -> dict:
        out = {"protocol": self.protocol, "n": self.n, "box": {"kind": self.box_kind},
               "trials": self.trials, "seed": self.seed, "rounds": self.rounds}
        if self.box_p is not None:
            out["box"]["p"] = self.box_p
        for key in ("variant", "p0", "bits", "function", "batch_size", "audit"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@lru_cache(maxsize=None)
def _behavior(kind: str, n: int, p: Optional[float]) -> BoxBehavior:
    poly = svetlichny_box(n)
    if kind == "perfect":
        return perfect_box(poly)
    if kind == "noisy":
        return noisy_box(n, p)
    e = box_to_bell(poly)
    if kind == "lhv":
        return lhv_strategy_box(lhv_max(e).strategy)
    return ghz_box(ghz_max(e, GhzConfig(seed=0)).strategy)


def box_for(scenario: Scenario, arity: int) -> BoxBehavior:
    return _behavior(scenario.box_kind, arity, scenario.box_p)


def box_reliability(b: BoxBehavior) -> Optional[float]:
    """Per-input success probability if it is the same for every input, else ``None``.

    Only then do box errors act like input-independent coin flips.
    """
    poly = svetlichny_box(b.n)
    probs = b.as_float()
    par = np.array([bin(o).count("1") & 1 for o in range(1 << b.n)])
    per_input = np.array([probs[z][par == poly(z)].sum() for z in range(1 << b.n)])
    if np.ptp(per_input) > 1e-12:
        return None
    return float(per_input[0])


def _target(name: str, parts: list[Bits]) -> Bits:
    flat = np.concatenate(parts, axis=0)
    if name == "and":
        return np.bitwise_and.reduce(flat, axis=0)
    if name == "or":
        return np.bitwise_or.reduce(flat, axis=0)
    if name == "parity":
        return np.bitwise_xor.reduce(flat, axis=0)
    # inner product of the first half of the bits with the second half, padded with zeros
    half = (flat.shape[0] + 1) // 2
    lo, hi = flat[:half], flat[half:]
    hi = np.concatenate([hi, np.zeros((half - hi.shape[0], flat.shape[1]), dtype=np.uint8)])
    return np.bitwise_xor.reduce(lo & hi, axis=0)


@dataclass
class CurvePoint:
    round: int
    trials: int
    successes: int
    p_empirical: float
    p_analytic: Optional[float]
    stderr: float


@dataclass
class TrialStats:
    protocol: str
    n: int
    trials: int
    successes: int
    seed: int
    analytic: Optional[float] = None
    audit_passed: Optional[bool] = None
    curve: list[CurvePoint] = field(default_factory=list)
    scenario: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.successes <= self.trials:
            raise ValueError("successes must lie in [0, trials]")

    @property
    def probability(self) -> float:
        return self.successes / self.trials

    @property
    def stderr(self) -> float:
        p = self.probability
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials)

    def within(self, sigmas: float = 3.0) -> bool:
        if self.analytic is None:
            return True
        sigma = math.sqrt(self.analytic * (1 - self.analytic) / self.trials)
        return abs(self.probability - self.analytic) <= sigmas * sigma

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "n": self.n,
            "trials": self.trials,
            "successes": self.successes,
            "probability": _g12(self.probability),
            "stderr": _g12(self.stderr),
            "analytic": None if self.analytic is None else _g12(self.analytic),
            "seed": self.seed,
            "audit_passed": self.audit_passed,
            "scenario": self.scenario,
            "curve": [{**asdict(c), "p_empirical": _g12(c.p_empirical), "stderr": _g12(c.stderr),
                       "p_analytic": None if c.p_analytic is None else _g12(c.p_analytic)} for c in self.curve],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "p_empirical", "p_analytic", "stderr"])
        for c in self.curve:
            writer.writerow([c.round, f"{c.p_empirical:.12g}",
                             "" if c.p_analytic is None else f"{c.p_analytic:.12g}", f"{c.stderr:.12g}"])
        return buf.getvalue()


def _g12(x: float) -> float:
    return float(f"{x:.12g}")


def _majority_q(scenario: Scenario) -> Optional[float]:
    """Probability the equality (hence majority) gadget is right, when box errors are coin flips."""
    if scenario.variant == "bipartite":
        p = box_reliability(box_for(scenario, 2))
        return None if p is None else bipartite_equality_success(scenario.n, p)
    p = box_reliability(box_for(scenario, scenario.n))
    return None if p is None else equality_success(p)


def _leaf_p(scenario: Scenario) -> float:
    if scenario.protocol == "end_to_end":
        return float(base_success(scenario.n * scenario.bits))
    if scenario.p0 is not None:
        return scenario.p0
    return float(base_success(scenario.n))


def analytic_success(scenario: Scenario, depth: Optional[int] = None) -> Optional[float]:
    q = _majority_q(scenario)
    if q is None:
        return None
    if scenario.protocol in ("equality", "majority"):
        return q
    p = _leaf_p(scenario)
    return boost_curve(p, q, depth if depth is not None else scenario.rounds)[-1]


def _run_batch(scenario: Scenario, depth: int, batch_index: int, size: int, audit: bool) -> tuple[int, Optional[bool]]:
    """Run ``size`` trials in one vectorized batch; returns (successes, audit result)."""
    stream = RngStream(scenario.seed, (depth << 40) | batch_index)
    env = stream.child(0).generator()
    nature = stream.child(1).generator()
    n = scenario.n
    shared = SharedRandomness(size, stream.child(2))
    private = [BitTape(size, stream.child(3 + i).generator()) for i in range(n)]
    bipartite = scenario.variant == "bipartite"
    if bipartite:
        device_factory = _bipartite_factory(box_for(scenario, 2))
    else:
        device_factory = _multipartite_factory(box_for(scenario, n))

    if scenario.protocol in ("equality", "majority"):
        inputs = env.integers(0, 2, size=(n, 3, size), dtype=np.uint8)
        z = np.bitwise_xor.reduce(inputs, axis=0)
        if scenario.protocol == "equality":
            truth = ((z[0] == z[1]) & (z[1] == z[2])).astype(np.uint8)

            def make(st):
                if bipartite:
                    return bipartite_equality_program(st, list(st.inputs), ("eq2", ()))
                return equality_program(st, list(st.inputs), [("eq", (), k) for k in range(3)])
        else:
            truth = ((z[0].astype(int) + z[1] + z[2]) >= 2).astype(np.uint8)
            make = lambda st: majority_program(st, list(st.inputs), [("eq2", ())] if bipartite else
                                               [("eq", (), k) for k in range(3)], bipartite)
        party_inputs = [inputs[i] for i in range(n)]
    elif scenario.protocol == "boost":
        p0 = _leaf_p(scenario)
        leaves = 3**depth
        truth = env.integers(0, 2, size=size, dtype=np.uint8)
        # the environment hands each party one share per weak instance
        correct = env.random((leaves, size)) < p0
        shares = env.integers(0, 2, size=(leaves, n, size), dtype=np.uint8)
        shares[:, n - 1] = truth ^ (~correct).astype(np.uint8) ^ np.bitwise_xor.reduce(shares[:, : n - 1], axis=1)
        party_inputs = [shares[:, i] for i in range(n)]

        def leaf(st, path):
            yield from _no_boxes()
            idx = sum(k * 3**(depth - 1 - d) for d, k in enumerate(path))
            return st.inputs[idx]

        make = lambda st: boosted_program(st, depth, leaf, (), bipartite)
    else:
        bits = scenario.bits
        inputs = env.integers(0, 2, size=(n, bits, size), dtype=np.uint8)
        party_inputs = [inputs[i] for i in range(n)]
        fname = scenario.function
        f = lambda parts: _target(fname, parts)
        truth = f(party_inputs)
        sizes = [bits] * n
        leaf = lambda st, path: base_program(st, f, sizes)
        make = lambda st: boosted_program(st, depth, leaf, (), bipartite)

    states = [PartyState(i, n, party_inputs[i], shared.view(), private[i].cursor()) for i in range(n)]
    shares, transcripts = execute([make(st) for st in states], device_factory, nature, states)
    result = np.bitwise_xor.reduce(np.stack(shares), axis=0)
    successes = int(np.sum(result == truth))
    audit_ok = None
    if audit:
        audit_ok = all(audit_party(make, i, n, party_inputs[i], transcripts[i], size) for i in range(n))
    return successes, audit_ok


def _run_depth(scenario: Scenario, depth: int, workers: int) -> tuple[int, Optional[bool]]:
    sizes = []
    left = scenario.trials
    while left > 0:
        sizes.append(min(scenario.batch_size, left))
        left -= sizes[-1]
    jobs = [(scenario, depth, b, size, scenario.audit and b == 0) for b, size in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_batch, *zip(*jobs)))
    else:
        results = [_run_batch(*job) for job in jobs]
    successes = sum(r[0] for r in results)
    audits = [r[1] for r in results if r[1] is not None]
    return successes, (all(audits) if audits else None)


def run_trials(scenario: Scenario, threads: int = 1) -> TrialStats:
    """Monte Carlo over a scenario.

    Trials are split into batches; batch ``b`` at boosting depth ``d`` draws
    from ``RngStream(seed, (d << 40) | b)``, so results do not depend on
    ``threads``.  Boost-type scenarios run every depth ``0..rounds`` and
    record a curve point for each.
    """
    scenario.validate()
    if scenario.protocol in ("equality", "majority"):
        successes, audit = _run_depth(scenario, 0, threads)
        return TrialStats(scenario.protocol, scenario.n, scenario.trials, successes, scenario.seed,
                          analytic_success(scenario), audit, scenario=scenario.to_dict())
    q = _majority_q(scenario)
    analytic = boost_curve(_leaf_p(scenario), q, scenario.rounds) if q is not None else None
    curve = []
    audits = []
    for depth in range(scenario.rounds + 1):
        successes, audit = _run_depth(scenario, depth, threads)
        if audit is not None:
            audits.append(audit)
        p = successes / scenario.trials
        curve.append(CurvePoint(depth, scenario.trials, successes, p,
                                None if analytic is None else analytic[depth],
                                math.sqrt(p * (1 - p) / scenario.trials)))
    last = curve[-1]
    return TrialStats(scenario.protocol, scenario.n, scenario.trials, last.successes, scenario.seed,
                      last.p_analytic, all(audits) if audits else None, curve, scenario.to_dict())


def communication_bits(n: int) -> int:
    """Bits needed to gather the distributed shares at one party afterwards."""
    return n - 1
