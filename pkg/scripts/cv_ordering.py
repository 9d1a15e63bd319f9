"""LOFO scores of non-stationary, stationary and Levitus predictors on non-stationary data.

Usage: python3 scripts/cv_ordering.py [seed] [strength]
"""
import sys
import time

from ohcgp.studies import cv_ordering_study


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    strength = float(sys.argv[2]) if len(sys.argv) > 2 else 1.0
    t0 = time.time()
    res = cv_ordering_study(seed=seed, strength=strength)
    print(f"{'variant':>11s} {'MAE':>8s} {'RMSE':>8s} {'CRPS':>8s}")
    for k in ("full", "stationary", "levitus"):
        print(f"{k:>11s} {res.mae[k]:8.4f} {res.rmse[k]:8.4f} {res.crps[k]:8.4f}")
    print(f"elapsed {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
