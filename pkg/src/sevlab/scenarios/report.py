"""Scenario outcomes and their JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable


class Blocked(Exception):
    """A mitigation stopped the attack."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class Failed(Exception):
    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


@dataclass
class ScenarioReport:
    scenario: str
    outcome: str = "success"  # success | blocked | failed
    reason: str = ""
    metrics: dict[str, Any] = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    result: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"scenario": self.scenario, "outcome": self.outcome, "metrics": self.metrics,
               "steps": self.steps}
        if self.reason:
            out["reason"] = self.reason
        if self.result:
            out["result"] = self.result
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @property
    def ok(self) -> bool:
        return self.outcome == "success"


class EventLog:
    """Guest exits and hypervisor actions, in order, as JSON-ready dicts."""

    def __init__(self, sink: Callable[[dict], None] | None = None, keep: bool = False):
        self.sink = sink
        self.keep = keep
        self.events: list[dict] = []
        self.count = 0

    def emit(self, record: dict) -> None:
        self.count += 1
        if self.keep:
            self.events.append(record)
        if self.sink is not None:
            self.sink(record)

    def exit(self, ev) -> None:
        if self.sink is not None or self.keep:
            self.emit(ev.to_json())
        else:
            self.count += 1

    def hv(self, step: int, action: str, **detail) -> None:
        if self.sink is not None or self.keep:
            self.emit({"step": step, "kind": "hv", "detail": {"action": action, **detail}})
        else:
            self.count += 1


def jsonl_sink(fh) -> Callable[[dict], None]:
    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write
