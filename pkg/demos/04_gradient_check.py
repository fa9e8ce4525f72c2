"""Verify analytic gradients against central differences on a tiny model.

Runs the composed check for both training objectives (masked reconstruction
and classifier cross entropy) over every parameter scalar and prints the
worst relative error. Equivalent to `regionmim grad-check --seed 7`.
"""

import time

from regionmim import composed_gradient_errors


def main():
    started = time.monotonic()
    errors = composed_gradient_errors(seed=7)
    for path, worst in errors.items():
        print(f"{path:>9} path: max relative error {worst:.3e}")
    verdict = "OK" if max(errors.values()) < 1e-4 else "FAILED"
    print(f"{verdict} in {time.monotonic() - started:.1f}s (tolerance 1e-4)")


if __name__ == "__main__":
    main()
