"""Convergence diagnostics for multi-chain MCMC output.

Both functions take draws shaped ``(n_chains, n_draws)``.
"""

from __future__ import annotations

import numpy as np


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(draws) -> float:
    """Multi-chain effective sample size.

    Autocorrelations are pooled across chains as in the split-free
    potential-scale formulation, and the sum is truncated with Geyer's initial
    monotone positive sequence.  Constant draws give NaN.
    """
    x = np.atleast_2d(np.asarray(draws, dtype=float))
    m, n = x.shape
    if n < 4:
        return float("nan")
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e150:
        return float("nan")
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float("nan")
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums Gamma_k = rho_2k + rho_2k+1; stop at the first non-positive one
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    pairs = pairs[: neg[0]] if neg.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))  # guards antithetic chains
    return float(m * n / tau)


def split_rhat(draws) -> float:
    """Split-chain potential scale reduction factor.

    Each chain is cut in half and the halves are treated as separate chains.
    Constant draws give NaN.
    """
    x = np.atleast_2d(np.asarray(draws, dtype=float))
    m, n = x.shape
    half = n // 2
    if half < 2:
        return float("nan")
    parts = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    w = parts.var(axis=1, ddof=1).mean()
    b_over_n = parts.mean(axis=1).var(ddof=1)
    if not w > 0:
        return float("nan")
    var_hat = (half - 1.0) / half * w + b_over_n
    return float(np.sqrt(var_hat / w))
