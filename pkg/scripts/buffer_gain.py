"""Relative age reduction from buffering, exact (truncated MDP) and simulated.

    python scripts/buffer_gain.py --m 10 --horizon 100000
"""

import argparse

from aoisched.core import ArrivalModel, derive_seed
from aoisched.mdp import SolveConfig, solve
from aoisched.schedulers import BufferedMDPPolicy, StructuralMDPPolicy
from aoisched.sim import SimConfig, run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--m", type=int, default=10)
    ap.add_argument("--horizon", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'p':>4} {'plain':>9} {'buffered':>9} {'exact':>7} {'sim':>7}")
    for gi, p in enumerate((0.4, 0.5, 0.6, 0.7, 0.8, 0.9)):
        probs = (p, p)
        plain = solve(SolveConfig(probs, args.m))
        buf = solve(SolveConfig(probs, args.m, buffered=True))
        seed = derive_seed(args.seed, gi)
        model = ArrivalModel(probs)
        a = run(StructuralMDPPolicy(plain.policy), SimConfig(model, args.horizon, seed)).avg_total_age
        b = run(BufferedMDPPolicy(buf.policy), SimConfig(model, args.horizon, seed, buffered=True)).avg_total_age
        exact = 1 - buf.average_cost / plain.average_cost
        print(f"{p:>4} {plain.average_cost:9.4f} {buf.average_cost:9.4f} {exact:7.2%} {1 - b / a:7.2%}")


if __name__ == "__main__":
    main()
