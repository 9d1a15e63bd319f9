"""Coverage of 95% OHC credible intervals over prior-drawn synthetic replicates.

Usage: python3 scripts/calibration.py [n_replicates]
"""
import sys
import time

from ohcgp.studies import calibration_study


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    t0 = time.time()
    res = calibration_study(n)
    widths = [hi - lo for lo, hi in res.intervals]
    print(f"replicates {n}  coverage {res.coverage:.3f}  median width {sorted(widths)[n // 2]:.4g} GJ")
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
