"""Vecchia OHC error against the dense path as the conditioning size m grows.

Usage: python3 scripts/m_study.py [m ...]
"""
import sys
import time

from ohcgp.studies import vecchia_m_study


def main():
    ms = tuple(int(a) for a in sys.argv[1:]) or (5, 10, 15, 25, 50, 80)
    t0 = time.time()
    rows, dense = vecchia_m_study(ms, n=500)
    print(f"dense OHC mu {dense.mu:.6g}  sigma {dense.sigma:.6g}")
    print(f"{'m':>4s} {'mu_err':>10s} {'sigma_err':>10s}")
    for r in rows:
        print(f"{r.m:4d} {r.mu_error:10.3e} {r.sigma_error:10.3e}")
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
