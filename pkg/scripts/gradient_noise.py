"""Tape vs finite-difference gradient of the composite loss as the stencil step varies.

Cancellation in the doubly-differentiated kernel block leaves round-off of
order eps * (sum |w|)^2 in the loss, so the finite-difference reference
degrades as the stencil step shrinks even though the tape gradient is exact.

    python scripts/gradient_noise.py
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from helpers import composite_gradient_error  # noqa: E402


def main():
    print(f"{'step/range':>10} {'fd step':>8} {'median':>9} {'max':>9}")
    for frac in (0.1, 0.05, 0.02, 0.01):
        for h in (1e-3, 1e-2):
            errs = [composite_gradient_error(seed, step_fraction=frac, h=h) for seed in range(10)]
            print(f"{frac:>10g} {h:>8g} {np.median(errs):9.1e} {np.max(errs):9.1e}")


if __name__ == "__main__":
    main()
