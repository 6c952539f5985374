"""Scenario entry points and the name -> runner registry.

Every scenario returns a :class:`ScenarioReport`. Success is decided by
ground truth (the VM key / interpreter state), never by the attacker's
own belief, so a mitigation can only show up as ``blocked`` or ``failed``.
"""

from __future__ import annotations

import random
from typing import Callable

from ..config import MachineConfig, RunConfig
from ..block_mover import InjectionError
from ..machine import NptLocked, OwnershipViolation
from ..tweak_cipher import BLOCK, PAGE, PaperDefault, TweakTable, make_tweak_table
from . import layout
from .cpuid_oracle import cpuid_oracle
from .oracles import Attack
from .patch_return import boot_once
from .report import Blocked, EventLog, Failed, ScenarioReport

NAMES = ("patch-return", "cpuid-oracle", "stack-detect", "oracle4", "oracle16", "decrypt")


def attacker_table(cfg: MachineConfig, machine_table: TweakTable) -> tuple[TweakTable, str]:
    """The table the attacker works with.

    Periodic tables are recoverable, so the attacker has the true one.
    Full-entropy tables are not; the attacker is left with a stale guess.
    """
    if cfg.table == "full":
        return make_tweak_table(PaperDefault(n=cfg.n)), "stale"
    return machine_table, "recovered"


def _finish(report: ScenarioReport, machine, fn: Callable[[], None]) -> ScenarioReport:
    try:
        fn()
    except Blocked as e:
        report.outcome, report.reason = "blocked", e.reason
        if e.detail:
            report.result["detail"] = e.detail
    except OwnershipViolation as e:
        report.outcome, report.reason = "blocked", "ownership"
        report.result["detail"] = str(e)
    except NptLocked as e:
        report.outcome, report.reason = "blocked", "npt-locked"
        report.result["detail"] = str(e)
    except Failed as e:
        report.outcome, report.reason = "failed", e.detail
    except InjectionError as e:
        report.outcome, report.reason = "failed", f"injection: {e}"
    report.metrics.update(machine.metrics.snapshot())
    report.metrics.setdefault("sync_per_block", None)
    return report


def _attack(cfg: MachineConfig, params: dict, log: EventLog, corpus_size: int) -> Attack:
    sp = params.get("stack_pointer")
    victim = layout.build_victim(cfg, corpus_size, int(sp, 0) if isinstance(sp, str) else sp)
    if params.get("snapshot"):
        with open(params["snapshot"], "rb") as fh:
            victim.machine.load_snapshot(fh.read())
    table, source = attacker_table(cfg, victim.machine.table)
    att = Attack(victim, table, driver=str(params.get("driver", "auto")), log=log,
                 shift_runs=_flag(params.get("shift_runs", False)))
    att.note("table", source=source)
    return att


def _flag(v) -> bool:
    return v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")


def _blocks(seed: int, count: int) -> list[bytes]:
    rng = random.Random(f"blocks:{seed}")
    return [rng.randbytes(BLOCK) for _ in range(count)]


def scenario_stack_detect(cfg: MachineConfig, params: dict | None = None, log: EventLog | None = None,
                          corpus_size: int = 8 << 20) -> ScenarioReport:
    params = params or {}
    log = log or EventLog()
    att = _attack(cfg, params, log, corpus_size)
    rep = ScenarioReport("stack-detect")
    true_sp = att.vm.regs[7]

    def body():
        hpa, off = att.stack_detect()
        # ground truth: F's CALL pushed one return address below the initial pointer
        want = att.machine.translate(true_sp - 8)
        rep.result.update({"stack_hpa": hpa, "stack_offset": off, "aligned": att.session.alignment})
        if (hpa | off) != want:
            raise Failed(f"located {hpa | off:#x}, true stack pointer at {want:#x}")
    _finish(rep, att.machine, body)
    rep.steps = att.steps
    return rep


def scenario_oracle4(cfg: MachineConfig, params: dict | None = None, log: EventLog | None = None,
                     corpus_size: int = 8 << 20) -> ScenarioReport:
    params = params or {}
    log = log or EventLog()
    att = _attack(cfg, params, log, corpus_size)
    rep = ScenarioReport("oracle4")
    count = int(params.get("count", 100))
    rng = random.Random(f"values:{cfg.seed}")
    values = [int(v, 0) for v in str(params["values"]).split(",")] if "values" in params \
        else [rng.getrandbits(32) for _ in range(count)]

    def body():
        att.stack_detect()
        m = att.machine
        s0 = att.session.sync_count
        gpa = att.session.oracle_block_gpa
        for v in values:
            att.oracle4(v)
            e = (v & 0xFFFFFFFF).to_bytes(4, "little")
            if m.referee_decrypt(m.translate(gpa), BLOCK) != (e + bytes(4)) * 2:
                raise Failed(f"oracle4 block for {v:#x} does not verify")
        rep.metrics["sync_per_block"] = round((att.session.sync_count - s0) / max(1, len(values)), 3)
        rep.result.update({"blocks": len(values), "verified": len(values)})
    _finish(rep, att.machine, body)
    rep.steps = att.steps
    return rep


def scenario_oracle16(cfg: MachineConfig, params: dict | None = None, log: EventLog | None = None,
                      corpus_size: int = 8 << 20) -> ScenarioReport:
    params = params or {}
    log = log or EventLog()
    att = _attack(cfg, params, log, corpus_size)
    rep = ScenarioReport("oracle16")
    blocks = _blocks(cfg.seed, int(params.get("count", 100)))

    def body():
        att.bootstrap16()
        m = att.machine
        gpa = att.session.oracle_block_gpa
        s0 = att.session.sync_count
        for k, v in enumerate(blocks):
            att.oracle16(v)
            if m.referee_decrypt(m.translate(gpa), BLOCK) != v:
                raise Failed(f"block {k} does not decrypt to the requested plaintext")
        att.finish()
        rep.metrics["sync_per_block"] = round((att.session.sync_count - s0) / max(1, len(blocks)), 3)
        rep.result.update({"blocks": len(blocks), "verified": len(blocks),
                           "bootstrap_syncs": s0, "driver": att.driver.name,
                           "chain_violations": len(att.chain_violations)})
        if att.chain_violations:
            raise Failed(f"uncontrolled bytes executed: {att.chain_violations[:4]}")
    _finish(rep, att.machine, body)
    rep.steps = att.steps
    return rep


def scenario_decrypt(cfg: MachineConfig, params: dict | None = None, log: EventLog | None = None,
                     corpus_size: int = 8 << 20) -> ScenarioReport:
    params = params or {}
    log = log or EventLog()
    att = _attack(cfg, params, log, corpus_size)
    rep = ScenarioReport("decrypt")
    target = int(str(params.get("target", layout.TARGET_FRAME << 12)), 0)
    length = int(str(params.get("length", PAGE)), 0)

    def body():
        got = att.decrypt(target, length)
        want = att.machine.referee_guest_view(target, length) if length else b""
        rep.result.update({"target": target, "length": length, "match": got == want})
        att.finish()
        if got != want:
            raise Failed("decrypted bytes differ from the guest's view")
    _finish(rep, att.machine, body)
    rep.steps = att.steps
    return rep


def scenario_cpuid_oracle(cfg: MachineConfig, params: dict | None = None, log: EventLog | None = None,
                          corpus_size: int = 8 << 20) -> ScenarioReport:
    params = params or {}
    log = log or EventLog()
    att = _attack(cfg, params, log, corpus_size)
    rep = ScenarioReport("cpuid-oracle")
    blocks = _blocks(cfg.seed, int(params.get("count", 100)))

    def body():
        m = att.machine
        cts = cpuid_oracle(att, blocks)
        buf = m.translate(layout.CPUID_BUF)
        for k, (pt, ct) in enumerate(zip(blocks, cts)):
            if m.referee_encrypt_block(pt, buf) != ct:
                raise Failed(f"block {k} does not verify")
        rep.metrics["sync_per_block"] = round(m.metrics.vm_exits / len(blocks), 3) if blocks else None
        rep.result.update({"blocks": len(blocks), "verified": len(cts), "oracle_exits": m.metrics.vm_exits})
    _finish(rep, att.machine, body)
    rep.steps = att.steps
    return rep


def scenario_patch_return(cfg: MachineConfig, params: dict | None = None, log: EventLog | None = None,
                          corpus_size: int = 8 << 20) -> ScenarioReport:
    params = params or {}
    log = log or EventLog()
    runs = int(params.get("runs", 20))
    inject = _flag(params.get("inject", True))
    rep = ScenarioReport("patch-return")
    bases: list[int] = []
    metrics = {"vm_exits": 0, "page_faults": 0, "blocks_moved": 0}

    class _Sum:
        def snapshot(self):
            return dict(metrics)

    holder = type("M", (), {"metrics": _Sum()})()

    def body():
        for k in range(runs):
            guest = layout.build_boot_guest(cfg, k)
            table, _ = attacker_table(cfg, guest.machine.table)
            try:
                bases.append(boot_once(guest, table, inject, log))
            finally:
                for key, v in guest.machine.metrics.snapshot().items():
                    metrics[key] += v
        rep.result.update({"bases": [hex(b) for b in bases], "inject": inject,
                           "distinct": len(set(bases))})
        if inject and any(b != layout.KERNEL_MIN for b in bases):
            raise Failed("kernel base was not pinned on every run")
    _finish(rep, holder, body)
    rep.steps = [{"action": "boot", "run": k, "base": hex(b)} for k, b in enumerate(bases)]
    return rep


SCENARIOS = {
    "patch-return": scenario_patch_return,
    "cpuid-oracle": scenario_cpuid_oracle,
    "stack-detect": scenario_stack_detect,
    "oracle4": scenario_oracle4,
    "oracle16": scenario_oracle16,
    "decrypt": scenario_decrypt,
}


def run_scenario(cfg: RunConfig, log: EventLog | None = None) -> ScenarioReport:
    name = cfg.scenario.name
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(NAMES)}")
    return SCENARIOS[name](cfg.machine, dict(cfg.scenario.parameters), log, cfg.corpus.size)
