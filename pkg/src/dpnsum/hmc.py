"""Adaptive Hamiltonian Monte Carlo (multinomial No-U-Turn sampler).

Step size is tuned by dual averaging toward ``target_accept`` and a diagonal
inverse metric is estimated in doubling windows during warmup, following the
usual three-phase schedule (fast / slow windows / fast).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 500
    draws_per_chain: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 1
    init_jitter: float = 0.5
    thin_bias: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.draws_per_chain < 1:
            raise ValueError("draws_per_chain must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if not 0.6 <= self.target_accept <= 0.99:
            raise ValueError("target_accept must lie in [0.6, 0.99]")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")
        if self.thin_bias < 1:
            raise ValueError("thin_bias must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def chain_seeds(seed, chains):
    return np.random.SeedSequence(seed).spawn(chains)


class _State:
    __slots__ = ("theta", "p", "v", "grad", "logp")

    def __init__(self, theta, p, v, grad, logp):
        # v is the velocity inv_metric * p
        self.theta, self.p, self.v, self.grad, self.logp = theta, p, v, grad, logp


class _Tree:
    __slots__ = ("begin", "end", "rho", "log_w", "sample", "n", "sum_accept",
                 "diverged", "turning")


def _logaddexp(a, b):
    if a < b:
        a, b = b, a
    if b == -math.inf:
        return a
    return a + math.log1p(math.exp(b - a))


class DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept):
        self.count += 1
        t = self.count
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept)
        log_eps = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        w = t ** (-self.kappa)
        self.log_eps_bar = w * log_eps + (1 - w) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def _windows(warmup):
    """Slow-window end points (iteration indices) of the metric adaptation."""
    init_buf, term_buf, base = 75, 50, 25
    if warmup < 20:
        return init_buf, []
    if init_buf + term_buf + base > warmup:
        init_buf = int(0.15 * warmup)
        term_buf = int(0.1 * warmup)
        base = warmup - init_buf - term_buf
    ends = []
    start, size = init_buf, base
    stop = warmup - term_buf
    while start < stop:
        end = start + size
        if end + 2 * size > stop:
            end = stop
        ends.append(end)
        start, size = end, size * 2
    return init_buf, ends


class NUTS:
    """Multinomial NUTS for a log density with gradient.

    ``logp_grad(theta)`` must return ``(logp, grad)``; non-finite values are
    treated as divergent.
    """

    def __init__(self, logp_grad, dim, max_tree_depth=10, target_accept=0.8):
        self.logp_grad = logp_grad
        self.dim = dim
        self.max_tree_depth = max_tree_depth
        self.target_accept = target_accept
        self.inv_metric = np.ones(dim)
        self.eps = 1.0

    def _eval(self, theta):
        try:
            lp, g = self.logp_grad(theta)
        except (FloatingPointError, ValueError, OverflowError):
            return -math.inf, np.zeros(self.dim)
        if not math.isfinite(lp) or not math.isfinite(float(g.sum())):
            return -math.inf, np.zeros(self.dim)
        return lp, g

    def _leapfrog(self, s, eps):
        p = s.p + (0.5 * eps) * s.grad
        theta = s.theta + eps * (self.inv_metric * p)
        lp, g = self._eval(theta)
        p += (0.5 * eps) * g
        return _State(theta, p, self.inv_metric * p, g, lp)

    def _state(self, s, p):
        return _State(s.theta, p, self.inv_metric * p, s.grad, s.logp)

    def _build(self, s, depth, direction, H0, rng):
        if depth == 0:
            new = self._leapfrog(s, direction * self.eps)
            H = -new.logp + 0.5 * float(new.p @ new.v)
            if not math.isfinite(H):
                H = math.inf
            t = _Tree()
            t.begin = t.end = t.sample = new
            t.rho = new.p
            t.log_w = H0 - H
            t.n = 1
            t.sum_accept = math.exp(min(0.0, H0 - H))
            t.diverged = (H - H0) > DIVERGENCE_THRESHOLD
            t.turning = False
            return t
        t1 = self._build(s, depth - 1, direction, H0, rng)
        if t1.diverged or t1.turning:
            return t1
        t2 = self._build(t1.end, depth - 1, direction, H0, rng)
        t = _Tree()
        t.n = t1.n + t2.n
        t.sum_accept = t1.sum_accept + t2.sum_accept
        t.begin, t.end = t1.begin, t2.end
        t.diverged, t.turning = t2.diverged, t2.turning
        t.rho = t1.rho + t2.rho
        t.log_w = _logaddexp(t1.log_w, t2.log_w)
        t.sample = t1.sample
        if t.diverged or t.turning:
            return t
        if math.log(rng.random()) < t2.log_w - t.log_w:
            t.sample = t2.sample
        # full-subtree check plus the two extra checks across the join
        rho = t.rho
        if not (t.begin.v @ rho > 0 and t.end.v @ rho > 0):
            t.turning = True
            return t
        r = t1.rho + t2.begin.p
        if not (t1.begin.v @ r > 0 and t2.begin.v @ r > 0):
            t.turning = True
            return t
        r = t2.rho + t1.end.p
        t.turning = not (t1.end.v @ r > 0 and t2.end.v @ r > 0)
        return t

    def transition(self, s, rng):
        p0 = rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        s = self._state(s, p0)
        H0 = -s.logp + 0.5 * float(p0 @ s.v)
        left = right = s
        rho = p0.copy()
        log_sum_w = 0.0
        sample = s
        n_leap, sum_accept, diverged, depth = 0, 0.0, False, 0
        for depth in range(self.max_tree_depth):
            if rng.random() < 0.5:
                t = self._build(right, depth, 1, H0, rng)
                new_left, new_right = left, t.end
            else:
                t = self._build(left, depth, -1, H0, rng)
                new_left, new_right = t.end, right
            n_leap += t.n
            sum_accept += t.sum_accept
            if t.diverged:
                diverged = True
                break
            if t.turning:
                break
            if math.log(rng.random()) < t.log_w - log_sum_w:
                sample = t.sample
            log_sum_w = _logaddexp(log_sum_w, t.log_w)
            rho = rho + t.rho
            left, right = new_left, new_right
            if not (left.v @ rho > 0 and right.v @ rho > 0):
                depth += 1
                break
        else:
            depth = self.max_tree_depth
        accept = sum_accept / max(n_leap, 1)
        return sample, accept, n_leap, diverged, depth

    def find_reasonable_eps(self, s, rng):
        eps = self.eps
        p = rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        s = self._state(s, p)
        H0 = -s.logp + 0.5 * float(p @ s.v)

        def log_ratio(e):
            new = self._leapfrog(s, e)
            H = -new.logp + 0.5 * float(new.p @ new.v)
            return H0 - H if math.isfinite(H) else -math.inf

        direction = 1 if log_ratio(eps) > math.log(0.8) else -1
        for _ in range(100):
            lr = log_ratio(eps)
            if direction == 1 and not lr > math.log(0.8):
                break
            if direction == -1 and lr > math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7 or eps < 1e-10:
                break
        self.eps = eps
        return eps


@dataclass
class ChainResult:
    draws: np.ndarray
    accept_stat: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    treedepth: np.ndarray
    logp: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    extras: dict = field(default_factory=dict)


def run_chain(logp_grad, theta0, config: SamplerConfig, seed_seq, collect=None,
              on_warmup_end=None):
    """Run one chain: warmup with adaptation, then ``draws_per_chain`` draws.

    ``collect(theta, d)`` may map each kept draw to a dict of derived arrays,
    returned stacked in ``ChainResult.extras``. ``on_warmup_end()`` is called
    once adaptation has finished.
    """
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    dim = theta0.size
    nuts = NUTS(logp_grad, dim, config.max_tree_depth, config.target_accept)
    lp, g = nuts._eval(theta0)
    if not np.isfinite(lp):
        raise FloatingPointError("initial point has non-finite log density")
    s = _State(theta0.copy(), np.zeros(dim), np.zeros(dim), g, lp)
    nuts.find_reasonable_eps(s, rng)
    da = DualAveraging(nuts.eps, config.target_accept)
    init_buf, ends = _windows(config.warmup)
    w_start = init_buf
    mean = np.zeros(dim)
    m2 = np.zeros(dim)
    count = 0
    for it in range(config.warmup):
        s, accept, _, _, _ = nuts.transition(s, rng)
        nuts.eps = da.update(accept)
        if ends and w_start <= it < ends[-1]:
            count += 1
            delta = s.theta - mean
            mean += delta / count
            m2 += delta * (s.theta - mean)
            if it + 1 in ends:
                var = m2 / max(count - 1, 1)
                nuts.inv_metric = (count / (count + 5.0)) * var + 1e-3 * (5.0 / (count + 5.0))
                count = 0
                mean[:] = 0.0
                m2[:] = 0.0
                nuts.find_reasonable_eps(s, rng)
                da.restart(nuts.eps)
    if config.warmup > 0:
        nuts.eps = da.final
    if on_warmup_end is not None:
        on_warmup_end()
    D = config.draws_per_chain
    draws = np.empty((D, dim))
    accept_stat = np.empty(D)
    n_leap = np.empty(D, dtype=np.int64)
    divergent = np.zeros(D, dtype=bool)
    depth = np.empty(D, dtype=np.int64)
    logps = np.empty(D)
    extras = {}
    for d in range(D):
        s, accept, nl, div, td = nuts.transition(s, rng)
        draws[d] = s.theta
        accept_stat[d], n_leap[d], divergent[d], depth[d], logps[d] = accept, nl, div, td, s.logp
        if collect is not None:
            for k, v in collect(s.theta, d).items():
                extras.setdefault(k, []).append(v)
    extras = {k: np.array(v) for k, v in extras.items()}
    return ChainResult(draws, accept_stat, n_leap, divergent, depth, logps, nuts.eps,
                       nuts.inv_metric.copy(), extras)


def run_chains(chain_fn, n_chains, threads=1):
    """Call ``chain_fn(c)`` for each chain, in worker processes if ``threads > 1``.

    ``chain_fn`` must be picklable when ``threads > 1``.
    """
    if threads > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, n_chains)) as pool:
            return list(pool.map(chain_fn, range(n_chains)))
    return [chain_fn(c) for c in range(n_chains)]
