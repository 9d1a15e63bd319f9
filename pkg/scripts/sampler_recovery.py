"""Recover known smooth fields from 3 years x 300 simulated points with one 5000-iteration chain.

Usage: python3 scripts/sampler_recovery.py [n_iterations] [burn_in]
"""
import sys
import time

from ohcgp.studies import SUMMARY_NAMES, sampler_recovery


def main():
    n_it = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
    burn = int(sys.argv[2]) if len(sys.argv) > 2 else n_it // 2
    t0 = time.time()
    res = sampler_recovery(n_iterations=n_it, burn_in=burn)
    z = res.z_scores()
    print(f"{'summary':14s} {'truth':>12s} {'init':>12s} {'median':>12s} {'sd':>10s} {'z':>7s}")
    for n in SUMMARY_NAMES:
        print(f"{n:14s} {res.truth[n]:12.5g} {res.init[n]:12.5g} {res.median[n]:12.5g} {res.sd[n]:10.3g} {z[n]:7.2f}")
    print("acceptance", {k: round(v, 3) for k, v in res.acceptance.items()})
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
