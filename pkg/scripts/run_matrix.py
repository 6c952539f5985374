"""Run every scenario under each mitigation setting and print a table."""

import argparse
import time

from sevlab.config import MachineConfig
from sevlab.scenarios.run import NAMES, SCENARIOS

SETTINGS = {
    "baseline": {},
    "rmp": {"rmp": True},
    "no-interception": {"interception": False},
    "npt-locked": {"npt_locked": True},
    "full-entropy": {"table": "full"},
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--count", type=int, default=20)
    args = ap.parse_args()
    params = {"count": args.count, "runs": 5}
    print(f"{'setting':<16} {'scenario':<13} {'outcome':<8} {'reason':<16} {'secs':>6}")
    for label, over in SETTINGS.items():
        cfg = MachineConfig(seed=args.seed, **over)
        for name in NAMES:
            t0 = time.perf_counter()
            rep = SCENARIOS[name](cfg, dict(params))
            reason = (rep.reason or "")[:16]
            print(f"{label:<16} {name:<13} {rep.outcome:<8} {reason:<16} {time.perf_counter() - t0:6.1f}")


if __name__ == "__main__":
    main()
