"""Command-line shell over the library: run, baseline, verify, tamper-demo, trust.

Exit codes: 0 success, 1 parse/validation error or bad indices, 2 I/O error,
3 safety violation during a run, 4 chain verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .errors import ParseError, ValidationError
from .ledger import block_to_json, dump_chain, format_timestamp, load_chain, reseal, tamper_transaction, verify_chain
from .ledger.merkle import merkle_root
from .sim import ScenarioConfig, Simulation, load_scenario
from .sim.runner import trust_table

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_UNSAFE, EXIT_BROKEN = 0, 1, 2, 3, 4


def _read_scenario(path: str) -> ScenarioConfig:
    p = Path(path)
    if not p.exists():
        bundled = resources.files("tpbft") / "scenarios" / p.name
        if bundled.is_file():
            return load_scenario(bundled.read_text(encoding="utf-8"))
    return load_scenario(p.read_text(encoding="utf-8"))


def _write_run_outputs(sim: Simulation, out: Path, with_trace: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    metrics = sim.metrics
    (out / "metrics.json").write_text(metrics.dumps(), encoding="utf-8")
    (out / "summary.csv").write_text(metrics.summary_csv(), encoding="utf-8")
    if with_trace:
        (out / "trace.jsonl").write_text(sim.trace_jsonl(), encoding="utf-8")
    for name, channel in sim.channels.items():
        with open(out / f"chain-{name}.jsonl", "w", encoding="utf-8") as fp:
            dump_chain(channel.storage_of(channel.reference_node), fp)
    with open(out / "registry.csv", "w", encoding="utf-8", newline="") as fp:
        sim.gateway.write_registry_csv(fp)
    with open(out / "policies.jsonl", "w", encoding="utf-8") as fp:
        sim.gateway.write_policies_jsonl(fp)
    with open(out / "decisions.jsonl", "w", encoding="utf-8") as fp:
        sim.gateway.write_decisions_jsonl(fp)


def _run_one(config: ScenarioConfig, args, out: Path) -> int:
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.verb == "baseline":
        config = replace(config, mode="baseline")
    sim = Simulation(config, trace=args.trace)
    metrics = sim.run()
    _write_run_outputs(sim, out, args.trace)
    if args.format == "csv":
        sys.stdout.write(metrics.summary_csv())
    else:
        brief = {
            "scenario": metrics.scenario,
            "mode": metrics.mode,
            "seed": metrics.seed,
            "rounds_finalized": metrics.rounds_finalized,
            "rounds_aborted": metrics.rounds_aborted,
            "safety_violations": metrics.safety_violations,
            "view_change_fallbacks": metrics.view_change_fallbacks,
            "view_changes": metrics.view_changes,
            "messages_total": metrics.messages_total,
            "out": str(out),
        }
        print(json.dumps(brief, sort_keys=True))
    return EXIT_UNSAFE if metrics.safety_violations else EXIT_OK


def cmd_run(args) -> int:
    target = Path(args.scenario)
    out = Path(args.out)
    if target.is_dir():
        code = EXIT_OK
        for path in sorted(target.glob("*.scenario")):
            code = max(code, _run_one(load_scenario(path.read_text(encoding="utf-8")), args, out / path.stem))
        return code
    return _run_one(_read_scenario(args.scenario), args, out)


def cmd_trust(args) -> int:
    config = _read_scenario(args.scenario)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    metrics = Simulation(config).run()
    rows = trust_table(config, metrics)
    if args.format == "json":
        text = json.dumps(
            [{"epoch": e, "node": n, "global_trust": t, "in_cg": c, "in_pg": p} for e, n, t, c, p in rows],
            sort_keys=True,
        ) + "\n"
        name = "trust.json"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "node", "global_trust", "in_cg", "in_pg"])
        for e, n, t, c, p in rows:
            writer.writerow([e, n, repr(t), str(c).lower(), str(p).lower()])
        text = buf.getvalue()
        name = "trust.csv"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _load_chain_file(path: str):
    with open(path, encoding="utf-8") as fp:
        try:
            return load_chain(fp)
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(path, f"not a chain export: {exc}") from None


def cmd_verify(args) -> int:
    chain = _load_chain_file(args.chain)
    broken = verify_chain(chain)
    if broken is None:
        print(f"valid: {len(chain)} blocks")
        return EXIT_OK
    print(f"broken at block {broken.index}: {broken.reason.value}")
    return EXIT_BROKEN


def _describe(label: str, block) -> str:
    h = block.header
    return f"{label} block {block.height}: merkle_root={h.merkle_root.hex()} header_hash={h.header_hash.hex()} time={format_timestamp(h.timestamp)}"


def _verdict(chain) -> str:
    broken = verify_chain(chain)
    return "Valid" if broken is None else f"BrokenAt({broken.index}, {broken.reason.value})"


def cmd_tamper_demo(args) -> int:
    chain = _load_chain_file(args.chain)
    if not 0 <= args.block < len(chain):
        print(f"block index {args.block} outside 0..{len(chain) - 1}", file=sys.stderr)
        return EXIT_INVALID
    target = chain[args.block]
    if not 0 <= args.tx < len(target.transactions):
        print(f"transaction index {args.tx} outside 0..{len(target.transactions) - 1}", file=sys.stderr)
        return EXIT_INVALID
    payload = target.transactions[args.tx].payload
    if not 0 <= args.byte < len(payload):
        print(f"byte index {args.byte} outside 0..{len(payload) - 1}", file=sys.stderr)
        return EXIT_INVALID
    if args.value is not None and not 0 <= args.value <= 255:
        print("byte value must lie in 0..255", file=sys.stderr)
        return EXIT_INVALID

    print(f"chain of {len(chain)} blocks, before mutation: {_verdict(chain)}")
    print(_describe("original", target))
    mutated = tamper_transaction(target, args.tx, args.byte, args.value)
    old, new = payload[args.byte], mutated.transactions[args.tx].payload[args.byte]
    print(f"block {args.block} tx {args.tx} byte {args.byte}: 0x{old:02x} -> 0x{new:02x}")
    edited = chain[: args.block] + [mutated] + chain[args.block + 1 :]
    recomputed = merkle_root(mutated.leaves())
    print(f"recomputed merkle_root={recomputed.hex()} (stored {target.header.merkle_root.hex()})")
    print(f"stored data edited, header untouched: {_verdict(edited)}")
    resealed = reseal(mutated)
    print(_describe("re-hashed", resealed))
    edited[args.block] = resealed
    print(f"after re-hashing block {args.block}: {_verdict(edited)}")
    # rebuilding every successor shows the change ripple through all later headers
    rebuilt = list(edited)
    for k in range(args.block + 1, len(rebuilt)):
        rebuilt[k] = reseal(rebuilt[k], rebuilt[k - 1].hash)
    changed = [k for k in range(args.block, len(chain)) if rebuilt[k].hash != chain[k].hash]
    print(f"header hashes changed when every successor is re-chained: {changed}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "tampered.jsonl", "w", encoding="utf-8") as fp:
            dump_chain(edited, fp)
        (out / "tamper-report.json").write_text(
            json.dumps({"schema_version": 1, "original": block_to_json(target), "rehashed": block_to_json(resealed), "verdict_unsealed": _verdict(chain[: args.block] + [mutated] + chain[args.block + 1 :]), "verdict_rehashed": _verdict(edited), "changed_headers": changed}, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpbft", description="T-PBFT consensus simulator and ledger tools")
    sub = parser.add_subparsers(dest="verb", required=True)

    def scenario_verb(name: str, help_text: str, fmt: str = "json"):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("scenario", help="scenario file, bundled scenario name, or directory of scenarios")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", default="tpbft-out", help="output directory")
        p.add_argument("--format", choices=("json", "csv"), default=fmt)
        p.add_argument("--trace", action="store_true", help="write a JSON-lines message trace")
        return p

    scenario_verb("run", "run a scenario with T-PBFT").set_defaults(func=cmd_run)
    scenario_verb("baseline", "run a scenario with flat PBFT over all active nodes").set_defaults(func=cmd_run)
    scenario_verb("trust", "per-epoch global trust and group membership", fmt="csv").set_defaults(func=cmd_trust)

    p = sub.add_parser("verify", help="verify an exported chain")
    p.add_argument("chain")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("tamper-demo", help="mutate one transaction byte and show detection")
    p.add_argument("chain")
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--tx", type=int, required=True)
    p.add_argument("--byte", type=int, default=0)
    p.add_argument("--value", type=int, help="replacement byte (default flips the low bit)")
    p.add_argument("--out", help="write the tampered chain and a JSON report here")
    p.set_defaults(func=cmd_tamper_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("TPBFT_SIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verb in ("run", "baseline", "trust") and args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must fit in 64 bits", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
