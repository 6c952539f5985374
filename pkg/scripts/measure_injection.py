"""Fraction of random byte constraints the corpus can satisfy in one frame."""

import argparse
import random

from sevlab.block_mover import NotFound, constraints_at, find_injection
from sevlab.config import MachineConfig
from sevlab.scenarios import layout


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--width", type=int, default=2, help="constrained bytes, starting at offset 0")
    ap.add_argument("--corpus-mib", type=int, default=8)
    args = ap.parse_args()
    victim = layout.build_victim(MachineConfig(seed=args.seed), args.corpus_mib << 20)
    mach, corpus = victim.machine, victim.corpus
    dest = layout.TARGET_FRAME << 12
    frame = mach.npt[layout.TARGET_FRAME].hpa_frame
    rng = random.Random(args.seed)
    hits = 0
    for _ in range(args.trials):
        try:
            find_injection(corpus, constraints_at(0, rng.randbytes(args.width)), dest, [frame], mach.table)
            hits += 1
        except NotFound:
            pass
    expected = 1 - (1 - 2.0 ** (-8 * args.width)) ** len(corpus)
    print(f"width {args.width}: {hits}/{args.trials} found ({hits / args.trials:.4f}), "
          f"independent-keys estimate {expected:.4f}")


if __name__ == "__main__":
    main()
