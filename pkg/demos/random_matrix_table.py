"""Expected extreme singular values of random matrices at fixed m.

Prints one row per n with the Monte-Carlo means, the asymptotic edges
sqrt(m) -/+ sqrt(n), and whether the means sit inside the edges.

    python demos/random_matrix_table.py --dist gaussian --m 1000 --trials 100
"""

import argparse

from nearrank.randmat import DISTRIBUTIONS, expected_extreme_sv, mp_edges


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dist", default="gaussian", choices=DISTRIBUTIONS)
    p.add_argument("--m", type=int, default=500)
    p.add_argument("--n", default="10,50,200,500")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    print(f"{'size':>12} {'E smin':>10} {'+-SE':>8} {'E smax':>10} {'edges':>18}")
    for n in (int(v) for v in args.n.split(",")):
        est = expected_extreme_sv(args.dist, args.m, n, trials=args.trials, seed=args.seed)
        lo, hi = mp_edges(args.m, n)
        print(f"{args.m:>5} x {n:<5} {est.mean_sigma_min:10.4f} {est.se_sigma_min:8.4f} "
              f"{est.mean_sigma_max:10.4f}   [{lo:7.2f}, {hi:7.2f}]")


if __name__ == "__main__":
    main()
