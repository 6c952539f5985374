"""Run configuration: flat ``key = value`` files plus overrides."""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field, fields

from .machine import Flags, Machine
from .tweak_cipher import CipherMode, PaperDefault, Seeded, TweakTable, make_tweak_table


class ConfigError(ValueError):
    pass


@dataclass
class MachineConfig:
    n: int = 48
    mode: str = "XEX"
    table: str = "paper"  # paper | seeded | full
    periodicity: int = 4
    rank: int = 28
    entropy_bits: int = 32
    sev_es: bool = True
    rmp: bool = False
    interception: bool = True
    npt_locked: bool = False
    seed: int = 1

    def cipher_mode(self) -> CipherMode:
        return CipherMode(self.mode.upper())

    def make_table(self) -> TweakTable:
        if self.table == "paper":
            return make_tweak_table(PaperDefault(n=self.n, rank=self.rank))
        if self.table == "seeded":
            return make_tweak_table(Seeded(self.seed, self.periodicity, self.rank, self.n,
                                           self.entropy_bits))
        if self.table == "full":
            return make_tweak_table(Seeded(self.seed, 16, self.n - 4, self.n))
        raise ConfigError(f"unknown table kind {self.table!r}")

    def flags(self) -> Flags:
        return Flags(sev_es=self.sev_es, rmp_ownership=self.rmp,
                     interception_enabled=self.interception, npt_locked=self.npt_locked)

    def new_machine(self) -> Machine:
        rng = random.Random(f"keys:{self.seed}")
        vm_key = rng.randbytes(16)
        hv_key = rng.randbytes(16)
        return Machine(self.make_table(), self.cipher_mode(), vm_key, hv_key, self.flags())


@dataclass
class CorpusConfig:
    path: str = ""
    load_base: int = 0
    size: int = 8 << 20


@dataclass
class ScenarioConfig:
    name: str = ""
    parameters: dict[str, str] = field(default_factory=dict)


@dataclass
class OutputConfig:
    events_path: str = ""
    report_path: str = ""


@dataclass
class RunConfig:
    machine: MachineConfig = field(default_factory=MachineConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _coerce(raw: str, typ):
    if typ is bool or typ == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ is int or typ == "int":
        return int(raw, 0)
    return raw


def apply_setting(cfg: RunConfig, key: str, value: str) -> None:
    section, _, name = key.partition(".")
    if section == "scenario" and name.startswith("param."):
        cfg.scenario.parameters[name[len("param."):]] = value
        return
    target = getattr(cfg, section, None) if section in ("machine", "corpus", "scenario", "output") else None
    if target is None or not name:
        raise ConfigError(f"unknown config key {key!r}")
    known = {f.name: f for f in fields(target)}
    if name not in known or name == "parameters":
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(value, known[name].type))


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        apply_setting(cfg, k.strip(), v.strip())
    env = os.environ.get("SEVLAB_SEED")
    if env:
        cfg.machine.seed = int(env, 0)
    return cfg
