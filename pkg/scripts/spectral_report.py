"""Compare the second-largest eigenvalue modulus of golden-ratio and uniform rings.

    python3 scripts/spectral_report.py --n 5 10 20
"""
import argparse

from firma import ring


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[3, 5, 10, 20, 32])
    ap.add_argument("--gamma", type=float, nargs="+", default=[0.05, 0.25, 0.5, 0.75, 0.95])
    args = ap.parse_args()
    print(f"{'N':>3} {'gamma':>6} {'rho_golden':>11} {'rho_uniform':>12} {'golden-uniform':>15}")
    for n in args.n:
        for g in args.gamma:
            fib = ring.mixing_matrix(n, g).spectral_radius_excluding_one()
            uni = ring.uniform_spectral_radius(n, g)
            print(f"{n:3d} {g:6.2f} {fib:11.6f} {uni:12.6f} {fib - uni:+15.6f}")


if __name__ == "__main__":
    main()
