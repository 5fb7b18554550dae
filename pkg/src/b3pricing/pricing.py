"""Closed-form Black-Scholes pricing for European calls (no dividends)."""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import erfc

_SQRT2 = math.sqrt(2.0)


class DegenerateInputError(ValueError):
    """Raised by :func:`d1_d2` when sigma or tau is zero."""


class PricingInputs(NamedTuple):
    S: float
    K: float
    r: float
    sigma: float
    tau: float


def norm_cdf(x):
    """Standard normal CDF via erfc; scalar in, float out, array in, array out."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / _SQRT2)
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def payoff(S, K):
    """Call payoff max(S - K, 0) at expiry."""
    if np.ndim(S) == 0 and np.ndim(K) == 0:
        return max(float(S) - float(K), 0.0)
    return np.maximum(np.asarray(S, dtype=np.float64) - K, 0.0)


def d1_d2(S: float, K: float, r: float, sigma: float, tau: float) -> tuple[float, float]:
    if sigma <= 0.0 or tau <= 0.0:
        raise DegenerateInputError(f"d1/d2 undefined for sigma={sigma}, tau={tau}")
    vol = sigma * math.sqrt(tau)
    d1 = (math.log(S / K) + (r + 0.5 * sigma * sigma) * tau) / vol
    return d1, d1 - vol


def _check_inputs(S, K, sigma, tau):
    if not (np.all(np.asarray(S) > 0) and np.all(np.asarray(K) > 0)):
        raise ValueError("spot and strike must be strictly positive")
    if not (np.all(np.asarray(sigma) >= 0) and np.all(np.asarray(tau) >= 0)):
        raise ValueError("sigma and tau must be non-negative")


def bs_call_price(S, K, r, sigma, tau):
    """Black-Scholes price of a European call.

    Accepts scalars or broadcastable arrays. Zero tau returns the payoff and
    zero sigma (with tau > 0) returns the discounted intrinsic value, so the
    result never passes through an ill-defined d1/d2. Output is clipped to the
    no-arbitrage band ``[max(S - K e^{-r tau}, 0), S]`` to absorb rounding.
    """
    if all(np.ndim(v) == 0 for v in (S, K, r, sigma, tau)):
        S, K, r, sigma, tau = (float(v) for v in (S, K, r, sigma, tau))
        _check_inputs(S, K, sigma, tau)
        if tau == 0.0:
            return max(S - K, 0.0)
        disc_k = K * math.exp(-r * tau)
        lower = max(S - disc_k, 0.0)
        if sigma == 0.0:
            return lower
        d1, d2 = d1_d2(S, K, r, sigma, tau)
        price = S * norm_cdf(d1) - disc_k * norm_cdf(d2)
        return min(max(price, lower), S)

    S, K, r, sigma, tau = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (S, K, r, sigma, tau))
    )
    _check_inputs(S, K, sigma, tau)
    disc_k = K * np.exp(-r * tau)
    lower = np.maximum(S - disc_k, 0.0)
    vol = sigma * np.sqrt(tau)
    regular = vol > 0
    safe_vol = np.where(regular, vol, 1.0)
    d1 = (np.log(S / K) + (r + 0.5 * sigma * sigma) * tau) / safe_vol
    d2 = d1 - safe_vol
    price = S * norm_cdf(d1) - disc_k * norm_cdf(d2)
    price = np.where(regular, np.clip(price, lower, S), lower)
    return np.where(tau == 0, np.maximum(S - K, 0.0), price)


def price_dataset(rows: Sequence) -> list:
    """Return copies of ``rows`` with ``bs_price`` filled in, order preserved."""
    out = []
    for i, row in enumerate(rows):
        try:
            price = bs_call_price(row.stock_price, row.strike, row.selic_rate, row.volatility, row.tte)
        except ValueError as exc:
            raise ValueError(f"row {i}: {exc}") from exc
        out.append(dataclasses.replace(row, bs_price=price))
    return out
