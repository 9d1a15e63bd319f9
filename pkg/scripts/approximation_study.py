"""Bias of theta MLEs under the Gaussian approximation to the circular convolution.

Usage: python3 scripts/approximation_study.py [n_rep]
"""
import sys
import time

from ohcgp.studies import approximation_study


def main():
    n_rep = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    t0 = time.time()
    rows = approximation_study(n_rep=n_rep)
    print(f"{'range_deg':>9s} {'structure':>14s} {'theta_exact':>12s} {'theta_approx':>12s} {'frac_err':>10s}")
    for r in rows:
        print(f"{r.effective_range:9.2f} {r.structure:>14s} {r.theta_exact:12.6g} {r.theta_approx:12.6g} "
              f"{100 * r.fractional_error:9.4f}%")
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
