"""Command-line front end.

    sevlab recover  [--mode XE|XEX] [--n N] [--targets 4-19] [--period-bits 16] [--jobs J]
    sevlab scenario NAME [--count K] [--rmp] [--no-interception] [--events F] [--report F]
    sevlab snapshot save|load PATH [--out PATH]
    sevlab corpus IMAGE [--load-base ADDR]
    sevlab selftest

Exit codes: 0 ok, 1 recovered table differs, 2 rank deficiency / nothing
found, 3 inconsistent system, 4 scenario blocked, 5 scenario failed,
64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import random
import sys
import time

from . import recovery
from .block_mover import build_corpus
from .config import ConfigError, RunConfig, apply_setting, parse_config
from .machine import MachineError, SnapshotError, parse_snapshot_header
from .scenarios import layout
from .scenarios.report import EventLog, jsonl_sink
from .scenarios.run import NAMES, run_scenario
from .tweak_cipher import BLOCK, CipherMode

EXIT_OK, EXIT_MISMATCH, EXIT_RANK, EXIT_INCONSISTENT = 0, 1, 2, 3
EXIT_BLOCKED, EXIT_FAILED, EXIT_USAGE = 4, 5, 64
OUTCOME_EXIT = {"success": EXIT_OK, "blocked": EXIT_BLOCKED, "failed": EXIT_FAILED}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage, which would collide with EXIT_RANK
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _machine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. machine.n=20 (repeatable)")
    p.add_argument("--seed", type=lambda s: int(s, 0))
    p.add_argument("--n", type=int)
    p.add_argument("--mode", choices=["XE", "XEX", "xe", "xex"])
    p.add_argument("--table", choices=["paper", "seeded", "full"])
    p.add_argument("--rmp", action="store_true", help="enable page ownership checks")
    p.add_argument("--no-interception", action="store_true", help="SYNC no longer traps")
    p.add_argument("--npt-locked", action="store_true", help="hypervisor cannot change NPT permissions")
    p.add_argument("--no-sev-es", action="store_true")
    p.add_argument("--no-timestamps", action="store_true")
    p.add_argument("--report", help="write the JSON report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sevlab", description="Encrypted-VM attack simulator")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    rec = sub.add_parser("recover", help="recover tweak constants from a simulated machine")
    _machine_flags(rec)
    rec.add_argument("--targets", help="bit list such as 4-19 or 4,5,6 (default: all bits for XE, 4-7 for XEX)")
    rec.add_argument("--period-bits", type=int, default=16,
                     help="XEX search space per constant (default 16; 32 is the real unit size)")
    rec.add_argument("--jobs", type=int, default=1)
    rec.add_argument("--assume-mode", choices=["XE", "XEX", "xe", "xex"],
                     help="mode the attacker assumes (default: the machine's)")

    sc = sub.add_parser("scenario", help="run one attack scenario")
    sc.add_argument("name", choices=NAMES)
    _machine_flags(sc)
    sc.add_argument("--count", type=int, help="blocks or values to process")
    sc.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    sc.add_argument("--events", help="JSONL event log path")
    sc.add_argument("--snapshot", help="load this machine snapshot before the attack starts")

    sn = sub.add_parser("snapshot", help="save or load a victim machine snapshot")
    sn.add_argument("action", choices=["save", "load"])
    sn.add_argument("path")
    _machine_flags(sn)
    sn.add_argument("--out", help="after load, write the machine back out here")

    co = sub.add_parser("corpus", help="build a known-plaintext corpus from an image file")
    co.add_argument("image")
    co.add_argument("--load-base", type=lambda s: int(s, 0), default=0)
    co.add_argument("--report")

    sub.add_parser("selftest", help="quick internal consistency checks")
    return ap


def load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = parse_config(fh.read(), cfg)
    for kv in getattr(args, "set", []):
        k, eq, v = kv.partition("=")
        if not eq:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        apply_setting(cfg, k.strip(), v.strip())
    m = cfg.machine
    if args.seed is not None:
        m.seed = args.seed
    if args.n is not None:
        m.n = args.n
    if args.mode:
        m.mode = args.mode.upper()
    if args.table:
        m.table = args.table
    m.rmp = m.rmp or args.rmp
    m.interception = m.interception and not args.no_interception
    m.npt_locked = m.npt_locked or args.npt_locked
    m.sev_es = m.sev_es and not args.no_sev_es
    env = os.environ.get("SEVLAB_SEED")
    if env:
        m.seed = int(env, 0)
    return cfg


def parse_bits(text: str) -> list[int]:
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, dash, b = part.partition("-")
        lo = int(a)
        hi = int(b) if dash else lo
        if hi < lo:
            raise UsageError(f"bad bit range {part!r}")
        out.update(range(lo, hi + 1))
    return sorted(out)


def _emit(report: dict, path: str | None, stamp: bool) -> None:
    if stamp:
        report = {**report, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    text = json.dumps(report, sort_keys=True, indent=1)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def recovery_machine(cfg: RunConfig):
    """Machine plus a two-page cooperative guest at seeded host frames."""
    mach = cfg.machine.new_machine()
    rng = random.Random(f"recover:{cfg.machine.seed}")
    top = 1 << (cfg.machine.n - 12)
    home, reader = rng.sample(range(2, top), 2)
    mach.map_guest_page(0, home)
    mach.map_guest_page(1, reader)
    return mach


def cmd_recover(args) -> int:
    cfg = load_config(args)
    mach = recovery_machine(cfg)
    n = cfg.machine.n
    assumed = CipherMode(args.assume_mode.upper()) if args.assume_mode else mach.mode
    xe = assumed is CipherMode.XE
    targets = parse_bits(args.targets) if args.targets else (list(range(4, n)) if xe else [4, 5, 6, 7])
    if any(i < 4 or i >= n for i in targets):
        raise UsageError(f"targets must lie in 4..{n - 1}")
    setup = recovery.setup_probes(mach, 0, 1, bytes(range(BLOCK)), count=16)
    report = {"command": "recover", "mode": mach.mode.value, "assumed_mode": assumed.value, "n": n,
              "targets": targets,
              "seed": cfg.machine.seed}
    code = EXIT_OK
    try:
        if xe:
            res = recovery.recover_xe_constants(setup, targets)
        else:
            res = recovery.recover_xex_constants(setup, targets, period_bits=args.period_bits, jobs=args.jobs)
    except recovery.RankDeficient as e:
        report.update(outcome="rank-deficient", unrecoverable=e.unrecoverable, message=str(e))
        print(f"rank deficiency: {e}", file=sys.stderr)
        code = EXIT_RANK
    except (recovery.NotFound, recovery.Ambiguous) as e:
        report.update(outcome="not-found", message=str(e))
        print(f"recovery failed: {e}; the constants do not look periodic", file=sys.stderr)
        code = EXIT_RANK
    except recovery.Gf2Inconsistent as e:
        report.update(outcome="inconsistent", message=str(e))
        print(f"inconsistent system: {e}; is the mode really {assumed.value}?", file=sys.stderr)
        code = EXIT_INCONSISTENT
    else:
        consts = {}
        for i in targets:
            got = res.constants[i]
            ok = got == mach.table.constant(i)
            consts[f"t{i}"] = {"value": got.hex(), "provenance": res.provenance[i], "match": ok}
            print(f"t_{i:<2} = {' '.join(f'{b:02x}' for b in got)}  [{res.provenance[i]}]"
                  f"{'' if ok else '  MISMATCH'}", file=sys.stderr)
        match = all(c["match"] for c in consts.values())
        report.update(outcome="match" if match else "mismatch", constants=consts)
        code = EXIT_OK if match else EXIT_MISMATCH
    _emit(report, args.report, not args.no_timestamps)
    return code


def cmd_scenario(args) -> int:
    cfg = load_config(args)
    cfg.scenario.name = args.name
    if args.count is not None:
        cfg.scenario.parameters["count"] = str(args.count)
    for kv in args.param:
        k, eq, v = kv.partition("=")
        if not eq:
            raise UsageError(f"--param expects KEY=VALUE, got {kv!r}")
        cfg.scenario.parameters[k.strip()] = v.strip()
    if args.snapshot:
        cfg.scenario.parameters["snapshot"] = args.snapshot
    events = args.events or cfg.output.events_path
    fh = open(events, "w") if events else None
    try:
        log = EventLog(jsonl_sink(fh)) if fh else EventLog()
        rep = run_scenario(cfg, log)
    finally:
        if fh:
            fh.close()
    out = rep.to_json()
    out["seed"] = cfg.machine.seed
    _emit(out, args.report or cfg.output.report_path, not args.no_timestamps)
    return OUTCOME_EXIT[rep.outcome]


def cmd_snapshot(args) -> int:
    cfg = load_config(args)
    victim = layout.build_victim(cfg.machine, corpus_size=cfg.corpus.size)
    mach = victim.machine
    if args.action == "save":
        data = mach.dump_snapshot()
        with open(args.path, "wb") as fh:
            fh.write(data)
    else:
        with open(args.path, "rb") as fh:
            data = fh.read()
        parse_snapshot_header(data)
        mach.load_snapshot(data)
        if args.out:
            with open(args.out, "wb") as fh:
                fh.write(mach.dump_snapshot())
    report = {"command": "snapshot", "action": args.action, "frames": len(mach.memory),
              "sha256": hashlib.sha256(data).hexdigest()}
    _emit(report, args.report, not args.no_timestamps)
    return EXIT_OK


def cmd_corpus(args) -> int:
    with open(args.image, "rb") as fh:
        image = fh.read()
    corpus = build_corpus(image, args.load_base)
    _emit({"command": "corpus", "entries": len(corpus.plain), "bytes": len(image),
           "load_base": args.load_base, "sha256": hashlib.sha256(image).hexdigest()},
          args.report, False)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    failures = run_selftest()
    for name, ok in failures:
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(ok for _, ok in failures) else EXIT_FAILED


COMMANDS = {"recover": cmd_recover, "scenario": cmd_scenario, "snapshot": cmd_snapshot,
            "corpus": cmd_corpus, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.verb](args)
    except (UsageError, ConfigError, KeyError) as e:
        print(f"sevlab: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SnapshotError, OSError) as e:
        print(f"sevlab: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MachineError as e:
        print(f"sevlab: machine error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
