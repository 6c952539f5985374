"""Synchronisation cost of the 4-byte and 16-byte oracles for both drivers."""

import argparse

from sevlab.config import MachineConfig
from sevlab.scenarios.run import scenario_oracle4, scenario_oracle16


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--count", type=int, default=50)
    args = ap.parse_args()
    for interception in (True, False):
        cfg = MachineConfig(seed=args.seed, interception=interception)
        if interception:
            r4 = scenario_oracle4(cfg, {"count": args.count})
            print(f"oracle4  cpuid      sync/block {r4.metrics['sync_per_block']}  exits {r4.metrics['vm_exits']}")
        r16 = scenario_oracle16(cfg, {"count": args.count})
        print(f"oracle16 {r16.result.get('driver', '-'):<10} sync/block {r16.metrics['sync_per_block']}  "
              f"bootstrap {r16.result.get('bootstrap_syncs')}  exits {r16.metrics['vm_exits']}")


if __name__ == "__main__":
    main()
