"""Command-line interface.

Exit codes: 0 success, 1 failed verification or internal error, 2 usage or
configuration error.  The primary payload goes to stdout (or ``--out``);
logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .boxes import (
    BoxBehavior,
    box_to_bell,
    canonical_distribution,
    find_mapping,
    pairwise_and_parity,
    svetlichny_box,
    verify_nonsignaling,
    with_signaling_fault,
)
from .bounds import ALL_BOUNDS, HYBRID_MAX_BLOCK, LHV_MAX_PARTIES, BoundsError, GhzConfig, bound_report
from .inequality import DEFAULT_MAX_PARTIES, klyshko, svetlichny, unit_form
from .protocol import Scenario, ScenarioError, run_trials, thresholds
from .rng import resolve_seed

log = logging.getLogger("nlbox")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_UNRECORDED = {"out", "csv", "func", "threads", "verbose"}


class UsageError(Exception):
    pass


def _meta(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}
    return {"version": __version__, "seed": args.seed, "flags": flags}


def _header(args: argparse.Namespace) -> str:
    meta = _meta(args)
    return f"# nlbox {meta['version']} seed={meta['seed']} flags={json.dumps(meta['flags'], sort_keys=True)}\n"


def _emit(args: argparse.Namespace, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if getattr(args, "out", None):
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        log.info("wrote %s", args.out)
    else:
        sys.stdout.write(text)


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"
    return f"{float(x):.12g}"


# ---------------------------------------------------------------------------
# bell
# ---------------------------------------------------------------------------


def cmd_bell(args: argparse.Namespace) -> int:
    if not 2 <= args.n <= DEFAULT_MAX_PARTIES:
        raise UsageError(f"--n must lie in [2, {DEFAULT_MAX_PARTIES}]")
    e = svetlichny(args.n) if args.kind == "svetlichny" else klyshko(args.n)
    payload = {"meta": _meta(args)}
    if args.form == "unit":
        unit, scale = unit_form(e)
        payload.update(unit.to_dict())
        payload["scale"] = _fmt(scale)
    else:
        payload.update(e.to_dict())
    _emit(args, json.dumps(payload, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def _parse_which(text: str) -> tuple[str, ...]:
    if text == "all":
        return ALL_BOUNDS
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    unknown = set(names) - set(ALL_BOUNDS)
    if unknown or not names:
        raise UsageError(f"--which takes 'all' or a comma list of {', '.join(ALL_BOUNDS)}")
    return tuple(b for b in ALL_BOUNDS if b in names)


def cmd_bounds(args: argparse.Namespace) -> int:
    which = _parse_which(args.which)
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    if "hybrid" in which and args.n > 2 * HYBRID_MAX_BLOCK + 1:
        raise UsageError(f"exact hybrid bound is available only for n <= {2 * HYBRID_MAX_BLOCK + 1}")
    if ("lhv" in which or "quantum" in which) and args.n > LHV_MAX_PARTIES:
        raise UsageError(f"lhv/quantum bounds are available only for n <= {LHV_MAX_PARTIES}")
    config = GhzConfig(multistarts=args.multistarts, seed=args.seed)
    report = bound_report(args.n, which, config)
    if args.format == "json":
        payload = {"meta": _meta(args), **report.to_dict()}
        _emit(args, json.dumps(payload, indent=2))
    else:
        _emit(args, _header(args) + report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# box verify
# ---------------------------------------------------------------------------


def _pr_reference() -> BoxBehavior:
    # outputs uniform with a1 xor a2 = z1 and z2, written out by hand
    rows = [[1, 0, 0, 1], [1, 0, 0, 1], [1, 0, 0, 1], [0, 1, 1, 0]]
    return BoxBehavior(2, np.array(rows), 2, "pr-reference")


def cmd_box_verify(args: argparse.Namespace) -> int:
    n = args.n
    if not 2 <= n <= 8:
        raise UsageError("box verify supports 2 <= n <= 8")
    poly = svetlichny_box(n)
    unit, _ = unit_form(svetlichny(n))
    mapping = find_mapping(poly, unit)
    behavior = canonical_distribution(box_to_bell(poly))
    if args.inject_fault:
        behavior = with_signaling_fault(behavior)
    report = verify_nonsignaling(behavior)
    checks: list[tuple[str, bool, str]] = []
    checks.append(("normalization", report.normalized, ""))
    detail = "; ".join(
        "subset {" + ",".join(str(p + 1) for p in subset) + "}: " + msg for subset, msg in report.violations if subset
    )
    checks.append(("non-signaling", not any(s for s, _ in report.violations), detail))
    sign_ok = all(poly(z) == pairwise_and_parity(z, n) for z in range(1 << n))
    checks.append(("sign-rule", sign_ok, "q(q-1)/2 parity vs pairwise AND over all inputs"))
    checks.append(("mapping-to-S_n", mapping is not None,
                   "" if mapping is None else f"input_swap={mapping.input_swap} output_swap={mapping.output_swap}"))
    probs = {behavior.prob(z, o) for z in range(1 << n) for o in range(1 << n)}
    joint_ok = probs <= {Fraction(0), Fraction(2, 1 << n)}
    checks.append(("joint-values", joint_ok, f"all joints in {{0, 2^{1 - n}}}"))
    if n == 2:
        same = np.array_equal(behavior.probs, _pr_reference().probs) and behavior.denominator == 2
        checks.append(("pr-box-equivalence", same, "table equals the PR box"))

    lines = [_header(args).rstrip("\n")]
    for name, ok, info in checks:
        lines.append(f"{name:<20} {'PASS' if ok else 'FAIL'}" + (f"  {info}" if info else ""))
    _emit(args, "\n".join(lines))
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAIL


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


def _scenario_from_args(args: argparse.Namespace) -> Scenario:
    if args.scenario:
        try:
            with open(args.scenario, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read scenario: {exc}") from None
        if args.trials is not None:
            data["trials"] = args.trials
        if "seed" not in data:
            data["seed"] = args.seed
    else:
        if args.protocol is None or args.n is None:
            raise UsageError("give --scenario FILE or at least --protocol and --n")
        data = {"protocol": args.protocol, "n": args.n, "box": {"kind": args.box}, "seed": args.seed}
        if args.p is not None:
            data["box"]["p"] = args.p
        for key in ("trials", "rounds", "variant", "p0"):
            value = getattr(args, key)
            if value is not None:
                data[key] = value
    try:
        return Scenario.from_dict(data)
    except ScenarioError as exc:
        raise UsageError(f"invalid scenario: {exc}") from None


def cmd_protocol(args: argparse.Namespace) -> int:
    if args.action == "thresholds":
        p2, p3 = thresholds()
        text = _header(args) + f"bipartite     {p2:.12g}\nmultipartite  {p3:.12g}"
        _emit(args, text)
        return EXIT_OK
    scenario = _scenario_from_args(args)
    args.seed = scenario.seed
    stats = run_trials(scenario, threads=args.threads)
    payload = {"meta": _meta(args), **stats.to_dict()}
    _emit(args, json.dumps(payload, indent=2))
    csv_path = args.csv
    if csv_path is None and args.out and stats.curve:
        csv_path = str(Path(args.out).with_suffix(".csv"))
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(stats.curve_csv())
        log.info("wrote %s", csv_path)
    if stats.audit_passed is False:
        log.error("no-communication audit failed")
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                        help="run seed (default: $NLBOX_SEED or a fixed value)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for Monte Carlo batches")
    common.add_argument("--out", help="write the primary payload here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nlbox", description="Multipartite nonlocal-box toolkit.")
    parser.add_argument("--version", action="version", version=f"nlbox {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bell", parents=[common], help="emit a Bell expression as JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--form", choices=("exact", "unit"), default="exact")
    p.add_argument("--kind", choices=("svetlichny", "klyshko"), default="svetlichny")
    p.set_defaults(func=cmd_bell)

    p = sub.add_parser("bounds", parents=[common], help="LHV / hybrid / quantum / algebraic bounds of S_n")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--which", default="all")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--multistarts", type=int, default=32)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("box", help="nonlocal-box checks")
    box_sub = p.add_subparsers(dest="box_command", required=True)
    v = box_sub.add_parser("verify", parents=[common], help="verify the canonical Svetlichny box")
    v.add_argument("--n", type=int, required=True)
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_box_verify)

    p = sub.add_parser("protocol", parents=[common], help="simulate protocols or print thresholds")
    p.add_argument("action", nargs="?", choices=("run", "thresholds"), default="run")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--protocol", choices=("equality", "majority", "boost", "end_to_end"))
    p.add_argument("--n", type=int)
    p.add_argument("--box", choices=("perfect", "noisy", "lhv", "ghz"), default="noisy")
    p.add_argument("--p", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--variant", choices=("multipartite", "bipartite"))
    p.add_argument("--p0", type=float)
    p.add_argument("--csv", help="per-round curve CSV (default: next to --out for curve scenarios)")
    p.set_defaults(func=cmd_protocol)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.seed = resolve_seed(args.seed)
    except ValueError as exc:
        parser.error(f"bad seed: {exc}")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nlbox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BoundsError, ScenarioError) as exc:
        print(f"nlbox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure: %s", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
