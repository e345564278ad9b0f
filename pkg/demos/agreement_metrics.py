"""Agreement statistics between estimated and reference measurements.

Simulates a batch of noisy estimates, then reports mean absolute error,
mean relative error, Pearson correlation and Bland-Altman limits of
agreement -- the statistics the evaluation command writes per nutrient.

Run with:  python demos/agreement_metrics.py
"""
import numpy as np

from trayintake.metrics import agreement


def main():
    rng = np.random.default_rng(1)
    truth = rng.uniform(100.0, 900.0, size=40)
    estimates = truth * (1.0 + rng.normal(scale=0.06, size=40)) + 10.0

    stats = agreement(estimates, truth)
    print(f"mean absolute error : {stats.mae:8.2f}")
    print(f"mean relative error : {stats.mre_percent:8.2f} %")
    print(f"Pearson r           : {stats.pearson_r:8.4f}")
    print(f"bias                : {stats.bias:8.2f}")
    print(f"limits of agreement : ({stats.loa_low:.2f}, {stats.loa_high:.2f})")


if __name__ == "__main__":
    main()
