"""Print the two-user switch map at arrivals (1, 1) as ASCII art.

    python scripts/switch_map.py 0.9 0.5 --m 10

Rows are x2 (top = largest), columns x1; '1'/'2' is the served user, '.' idle.
"""

import argparse

from aoisched.mdp import SolveConfig, solve, switch_map
from aoisched.oracle import check_switch_structure


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("p1", type=float)
    ap.add_argument("p2", type=float)
    ap.add_argument("--m", type=int, default=10)
    args = ap.parse_args()

    res = solve(SolveConfig((args.p1, args.p2), args.m))
    grid = switch_map(res.policy, (1, 1))
    glyph = {0: ".", 1: "1", 2: "2"}
    for x2 in range(args.m, 0, -1):
        print(f"{x2:>3} " + " ".join(glyph[int(a)] for a in grid[x2 - 1]))
    print("    " + " ".join(str(x1 % 10) for x1 in range(1, args.m + 1)))
    print(f"average cost {res.average_cost:.6f}, switch-type: {check_switch_structure(res.policy).ok}")


if __name__ == "__main__":
    main()
