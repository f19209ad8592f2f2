"""Convergence diagnostics: rank-normalized split-R-hat and bulk/tail ESS.

All functions take draws shaped ``(chains, draws)`` for one scalar quantity,
or ``(chains, draws, ...)`` for the ``summarize_*`` helpers.
"""

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


def _split(x):
    x = np.asarray(x, dtype=float)
    half = x.shape[1] // 2
    if half < 1:
        return x
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _z_scale(x):
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat_raw(x):
    m, n = x.shape
    if n < 2 or m < 2:
        return np.nan
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else np.inf
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def split_rhat(x):
    """Rank-normalized split-R-hat (max of bulk and folded versions)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        return np.nan
    s = _split(x)
    if np.ptp(s) == 0:
        return 1.0
    bulk = _rhat_raw(_z_scale(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat_raw(_z_scale(folded)) if np.ptp(folded) > 0 else 1.0
    return float(max(bulk, tail))


def _autocov(x):
    n = x.shape[-1]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[..., :n]
    return acov / n


def ess_raw(x):
    """Effective sample size via Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    m, n = x.shape
    if n < 4:
        return np.nan
    if np.ptp(x) == 0:
        return float(m * n)
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = np.empty(n)
    rho[0] = 1.0
    rho[1:] = 1.0 - (mean_var - acov[:, 1:].mean(axis=0)) / var_plus
    # pair sums, truncated at the first negative pair, then made monotone
    t = 0
    pairs = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pairs.append(p)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def ess_bulk(x):
    s = _split(np.asarray(x, dtype=float))
    if np.ptp(s) == 0:
        return float(s.size)
    return ess_raw(_z_scale(s))


def ess_tail(x):
    s = _split(np.asarray(x, dtype=float))
    if np.ptp(s) == 0:
        return float(s.size)
    lo, hi = np.quantile(s, [0.05, 0.95])
    vals = []
    for ind in (s <= lo, s <= hi):
        ind = ind.astype(float)
        vals.append(float(ind.size) if np.ptp(ind) == 0 else ess_raw(ind))
    return float(min(vals))


def mcse_mean(x):
    x = np.asarray(x, dtype=float)
    ess = ess_raw(_split(x)) if x.shape[1] >= 4 else x.size
    return float(x.std(ddof=1) / np.sqrt(ess))


def summarize_block(draws, name):
    """Diagnostics rows for every scalar element of a ``(chains, draws, ...)`` block."""
    draws = np.asarray(draws, dtype=float)
    flat = draws.reshape(draws.shape[0], draws.shape[1], -1)
    shape = draws.shape[2:]
    rows = []
    for j in range(flat.shape[2]):
        idx = np.unravel_index(j, shape) if shape else ()
        label = name + ("[" + ",".join(str(int(i)) for i in idx) + "]" if idx else "")
        x = flat[:, :, j]
        rows.append({"parameter": label, "rhat": split_rhat(x),
                     "ess_bulk": ess_bulk(x), "ess_tail": ess_tail(x)})
    return rows
