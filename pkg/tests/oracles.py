"""Independent reference computations used by the tests.

Nothing here imports the code under test.
"""

import math
import statistics
from collections import defaultdict

import numpy as np
from scipy import integrate


def mc_call(S, K, r, sigma, tau, n_paths, rng, chunk=2_500_000):
    """Discounted mean payoff over lognormal terminal draws; returns (price, stderr)."""
    total = total_sq = 0.0
    done = 0
    drift = (r - 0.5 * sigma * sigma) * tau
    vol = sigma * math.sqrt(tau)
    while done < n_paths:
        m = min(chunk, n_paths - done)
        z = rng.standard_normal(m)
        pay = np.maximum(S * np.exp(drift + vol * z) - K, 0.0)
        total += pay.sum()
        total_sq += (pay * pay).sum()
        done += m
    mean = total / n_paths
    var = (total_sq - n_paths * mean * mean) / (n_paths - 1)
    disc = math.exp(-r * tau)
    return disc * mean, disc * math.sqrt(var / n_paths)


def gauss_cdf_quad(x):
    density = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    return 0.5 + integrate.quad(density, 0.0, x, epsabs=1e-14, epsrel=1e-14)[0]


def bs_put_via_erf(S, K, r, sigma, tau):
    """Closed-form put, computed with math.erf (parity oracle)."""
    phi = lambda x: 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
    v = sigma * math.sqrt(tau)
    d1 = (math.log(S / K) + (r + 0.5 * sigma * sigma) * tau) / v
    d2 = d1 - v
    return K * math.exp(-r * tau) * phi(-d2) - S * phi(-d1)


def rolling_vol_loop(closes, window=21):
    rets = [closes[i] / closes[i - 1] - 1 for i in range(1, len(closes))]
    return [statistics.stdev(rets[i - window + 1 : i + 1]) * math.sqrt(252) for i in range(window - 1, len(rets))]


def central_diff(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


def least_squares_baseline(X, y):
    """Affine least-squares fit; returns in-sample predictions."""
    A = np.column_stack([X, np.ones(len(X))])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return A @ coef


def group_mae(keys, actual, model, bs):
    acc = defaultdict(lambda: [0.0, 0.0, 0])
    for k, a, p, b in zip(keys, actual, model, bs):
        acc[k][0] += abs(a - p)
        acc[k][1] += abs(a - b)
        acc[k][2] += 1
    return {k: (em / n, eb / n, n) for k, (em, eb, n) in acc.items()}


def days_category(days):
    if 0 < days <= 31:
        return "1M"
    if 31 < days <= 62:
        return "2M"
    if 62 < days <= 92:
        return "3M"
    raise ValueError(days)
