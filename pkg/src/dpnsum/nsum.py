"""Weighted correlated NSUM model for governorate-level ARD.

Responses follow::

    y_ik ~ Poisson(exp(delta_i + rho_{g(i),k} + z_i . beta_k + b_ik))

with respondent log-degrees ``delta``, governorate log-prevalences ``rho``,
covariate effects ``beta`` and correlated mean-one biases
``b_i ~ MVN(mu, diag(tau) Omega diag(tau))``. Each respondent's likelihood
is multiplied by its survey weight.

Sampling happens on an unconstrained vector: scales are log-transformed, the
correlation Cholesky factor uses canonical partial correlations, ``rho`` and
``b`` are non-centered (standard-normal innovations scaled by their
hyperparameters) or centered, per block. ``delta`` and ``rho`` are centered by
default because each is informed by many counts; ``b`` is always
non-centered.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy.special import gammaln, log_ndtr

from . import diagnostics, kernels
from .ard import COVARIATES, DataError, SurveyDataset, design_matrix
from .correlation import free_to_cholesky, lkj_cholesky_diag_coef, lkj_log_normalizer, n_free
from .hmc import SamplerConfig, run_chain, run_chains
from .io import read_cache, write_cache

HALF_CAUCHY_SCALE = 2.5
LKJ_ETA = 2.0
NORMAL_PRIOR_VAR = 100.0
ETA_CLAMP = 30.0
DIVERGENCE_WARN_RATE = 0.05
RHAT_WARN = 1.05
CENTERABLE = ("delta", "rho")
CENTERED = ("delta", "rho")
_LOG2PI = np.log(2 * np.pi)


class NsumModelError(ValueError):
    pass


def bias_lognormal_params(tau_N):
    """``(mu, tau)`` with ``mu = log(1/sqrt(1 + tau_N^2))``, ``tau = sqrt(log(1 + tau_N^2))``.

    These make ``E[exp(b)] = 1`` for ``b ~ Normal(mu, tau^2)``.
    """
    tau_N = np.asarray(tau_N, dtype=float)
    if np.any(tau_N < 0):
        raise ValueError("tau_N must be non-negative")
    q = np.log1p(tau_N ** 2)
    mu, tau = -0.5 * q, np.sqrt(q)
    if mu.ndim == 0:
        return float(mu), float(tau)
    return mu, tau


@dataclass(frozen=True, eq=False)
class NsumData:
    """Arrays the likelihood needs, in kernel-ready layout."""

    y: np.ndarray          # (n, K) float
    mask: np.ndarray       # (n, K) float 0/1
    w: np.ndarray          # (n,)
    gidx: np.ndarray       # (n,) intp
    z: np.ndarray          # (n, P)
    G: int
    covariates: tuple = COVARIATES
    age_center: float = 0.0

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def K(self):
        return self.y.shape[1]

    @property
    def P(self):
        return self.z.shape[1]

    @classmethod
    def from_dataset(cls, dataset: SurveyDataset, age_center=None, weighted=True):
        if weighted and not dataset.is_weighted:
            raise DataError("dataset must be weighted before fitting; run compute_weights")
        if age_center is None:
            ages = [r.age_years for r in dataset.respondents]
            if any(a is None for a in ages):
                raise DataError("missing ages; run impute_ages before fitting")
            age_center = float(np.mean(ages)) if ages else 0.0
        z = design_matrix(dataset, age_center)
        w = dataset.weights if weighted else np.ones(dataset.n)
        return cls(np.ascontiguousarray(dataset.responses.counts, dtype=float),
                   np.ascontiguousarray(dataset.responses.observed, dtype=float),
                   np.ascontiguousarray(w, dtype=float),
                   np.ascontiguousarray(dataset.gov_index, dtype=np.intp),
                   np.ascontiguousarray(z, dtype=float), dataset.G, COVARIATES, age_center)

    @classmethod
    def empty(cls, G, K, P=len(COVARIATES)):
        return cls(np.zeros((0, K)), np.zeros((0, K)), np.zeros(0), np.zeros(0, dtype=np.intp),
                   np.zeros((0, P)), G, COVARIATES[:P] if P <= len(COVARIATES) else tuple(
                       f"z{p}" for p in range(P)))

    def with_weights(self, w):
        return NsumData(self.y, self.mask, np.ascontiguousarray(w, dtype=float), self.gidx,
                        self.z, self.G, self.covariates, self.age_center)


class Layout:
    """Slices of the unconstrained parameter vector.

    The ``delta`` and ``rho`` blocks hold the parameters themselves when
    listed in ``centered`` and their standard-normal innovations otherwise.
    With ``rho`` centered, the ``mu_rho`` block holds
    ``sqrt(G) * (mu_rho - mean_g rho) / sigma_rho``, which stays on a unit
    scale whatever ``sigma_rho`` is.
    """

    BLOCKS = ("delta", "log_sigma_delta", "rho", "mu_rho", "log_sigma_rho",
              "mu_rho_base", "log_sigma_rho_base", "beta", "log_tau_N", "omega_free",
              "bias_raw")

    def __init__(self, n, G, K, P, centered=CENTERED):
        self.n, self.G, self.K, self.P = n, G, K, P
        unknown = set(centered) - set(CENTERABLE)
        if unknown:
            raise ValueError(f"cannot center {sorted(unknown)}; choose from {CENTERABLE}")
        self.centered = tuple(b for b in CENTERABLE if b in centered)
        shapes = {
            "delta": (n,), "log_sigma_delta": (), "rho": (G, K), "mu_rho": (K,),
            "log_sigma_rho": (K,), "mu_rho_base": (), "log_sigma_rho_base": (),
            "beta": (P, K), "log_tau_N": (K,), "omega_free": (n_free(K),), "bias_raw": (n, K),
        }
        self.shapes = shapes
        self.slices = {}
        pos = 0
        for name in self.BLOCKS:
            size = int(np.prod(shapes[name])) if shapes[name] else 1
            self.slices[name] = slice(pos, pos + size)
            pos += size
        self.dim = pos

    def view(self, theta, name):
        v = theta[self.slices[name]]
        shape = self.shapes[name]
        return v[0] if shape == () else v.reshape(shape)

    def block_of(self, index):
        for name, sl in self.slices.items():
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)


@dataclass(frozen=True, eq=False)
class NsumParams:
    """Model parameters on their natural scale."""

    delta: np.ndarray
    sigma_delta: float
    rho: np.ndarray
    mu_rho: np.ndarray
    sigma_rho: np.ndarray
    mu_rho_base: float
    sigma_rho_base: float
    beta: np.ndarray
    tau_N: np.ndarray
    omega_chol: np.ndarray
    bias: np.ndarray

    def bias_params(self):
        return bias_lognormal_params(self.tau_N)

    def to_unconstrained(self, layout: Layout) -> np.ndarray:
        from .correlation import cholesky_to_free

        theta = np.empty(layout.dim)
        mu_b, tau = bias_lognormal_params(np.asarray(self.tau_N, dtype=float))
        mu_b, tau = np.atleast_1d(mu_b), np.atleast_1d(tau)
        delta = np.asarray(self.delta, dtype=float)
        vals = {
            "delta": delta if "delta" in layout.centered else delta / self.sigma_delta,
            "log_sigma_delta": np.log(self.sigma_delta),
            "rho": np.asarray(self.rho) if "rho" in layout.centered
            else (np.asarray(self.rho) - self.mu_rho) / self.sigma_rho,
            "mu_rho": np.sqrt(layout.G) * (self.mu_rho - np.mean(self.rho, axis=0))
            / self.sigma_rho if "rho" in layout.centered else self.mu_rho,
            "log_sigma_rho": np.log(self.sigma_rho),
            "mu_rho_base": self.mu_rho_base,
            "log_sigma_rho_base": np.log(self.sigma_rho_base),
            "beta": self.beta,
            "log_tau_N": np.log(self.tau_N),
            "omega_free": cholesky_to_free(self.omega_chol),
            "bias_raw": np.linalg.solve(
                self.omega_chol, ((np.asarray(self.bias) - mu_b) / tau).T).T
            if layout.n else np.zeros((0, layout.K)),
        }
        for name, v in vals.items():
            theta[layout.slices[name]] = np.ravel(v)
        return theta


class NsumModel:
    """Unconstrained log posterior and gradient for one dataset.

    ``centered`` lists the blocks (``"delta"``, ``"rho"``) sampled directly
    rather than as innovations scaled by their hyperparameters. Centering
    suits blocks whose elements are each informed by many counts.
    """

    def __init__(self, data: NsumData, prior_var=NORMAL_PRIOR_VAR, lkj_eta=LKJ_ETA,
                 eta_clamp=ETA_CLAMP, backend=None, centered=CENTERED):
        self.data = data
        self.layout = Layout(data.n, data.G, data.K, data.P, centered)
        self.centered_delta = "delta" in self.layout.centered
        self.centered_rho = "rho" in self.layout.centered
        self.dim = self.layout.dim
        self.prior_var = float(prior_var)
        self.prior_sd = float(np.sqrt(prior_var))
        self.lkj_eta = float(lkj_eta)
        self.eta_clamp = float(eta_clamp)
        self._diag_coef = lkj_cholesky_diag_coef(data.K, self.lkj_eta)
        self._lkj_lognorm = lkj_log_normalizer(data.K, self.lkj_eta)
        self._lgamma_const = float(np.sum(data.w[:, None] * data.mask * gammaln(data.y + 1.0)))
        self.kernel = backend or kernels
        self.n_clamped = 0
        n, G, K, P = data.n, data.G, data.K, data.P
        self._buf = dict(g_delta=np.empty(n), g_rho=np.empty((G, K)), g_beta=np.empty((P, K)),
                         g_mu_b=np.empty(K), g_tau=np.empty(K), g_L=np.empty((K, K)),
                         g_eps=np.empty((n, K)), g_free=np.zeros(n_free(K)))
        sl = self.layout.slices
        self._sl = [(sl[b].start, sl[b].stop) for b in Layout.BLOCKS]
        # constant parts of the prior densities
        hc = np.log(2.0 / (np.pi * HALF_CAUCHY_SCALE))
        nc = -0.5 * (_LOG2PI + np.log(self.prior_var))
        self._const = {
            "delta": -0.5 * n * _LOG2PI, "log_sigma_delta": hc, "rho": -0.5 * G * K * _LOG2PI,
            "mu_rho": K * nc - (0.5 * K * np.log(G) if self.centered_rho else 0.0),
            "log_sigma_rho": K * nc, "mu_rho_base": nc,
            "log_sigma_rho_base": hc, "beta": P * K * nc, "log_tau_N": K * hc,
            "omega_free": -self._lkj_lognorm, "bias_raw": -0.5 * n * K * _LOG2PI,
        }
        self._const_total = float(sum(self._const.values())) - self._lgamma_const

    # -- transforms -----------------------------------------------------------

    def unpack(self, theta) -> NsumParams:
        lay = self.layout
        v = partial(lay.view, theta)
        sigma_delta = np.exp(v("log_sigma_delta"))
        sigma_rho = np.exp(v("log_sigma_rho"))
        mu_rho = v("mu_rho")
        if self.centered_rho:
            mu_rho = v("rho").mean(axis=0) + sigma_rho * mu_rho / np.sqrt(lay.G)
        tau_N = np.exp(v("log_tau_N"))
        mu_b, tau = bias_lognormal_params(tau_N)
        L, _ = free_to_cholesky(v("omega_free"), lay.K)
        eps = v("bias_raw")
        delta = v("delta").copy() if self.centered_delta else sigma_delta * v("delta")
        return NsumParams(
            delta=delta, sigma_delta=float(sigma_delta),
            rho=v("rho").copy() if self.centered_rho else mu_rho + sigma_rho * v("rho"),
            mu_rho=mu_rho.copy(), sigma_rho=sigma_rho,
            mu_rho_base=float(v("mu_rho_base")),
            sigma_rho_base=float(np.exp(v("log_sigma_rho_base"))),
            beta=v("beta").copy(), tau_N=tau_N, omega_chol=L,
            bias=mu_b + tau * (eps @ L.T),
        )

    # -- density --------------------------------------------------------------

    def likelihood(self, params: NsumParams, weights=None) -> float:
        """Weighted Poisson log-likelihood at natural parameters (bias given directly)."""
        d = self.data
        w = d.w if weights is None else weights
        eta = params.delta[:, None] + params.rho[d.gidx] + d.z @ params.beta + params.bias
        eta = np.minimum(eta, self.eta_clamp)
        return float(np.sum(w[:, None] * d.mask * (d.y * eta - np.exp(eta) - gammaln(d.y + 1))))

    def _block_terms(self, theta):
        """Per-block log density (likelihood separate), for error reporting."""
        b = {name: self.layout.view(theta, name) for name in Layout.BLOCKS}
        V, K, c = self.prior_var, self.layout.K, self._const
        sigma_delta = np.exp(b["log_sigma_delta"])
        sigma_rho, sigma_base = np.exp(b["log_sigma_rho"]), np.exp(b["log_sigma_rho_base"])
        tau_N = np.exp(b["log_tau_N"])
        x = b["delta"] / sigma_delta if self.centered_delta else b["delta"]
        mu = b["mu_rho"]
        if self.centered_rho:
            mu = b["rho"].mean(axis=0) + sigma_rho * mu / np.sqrt(self.layout.G)
        xr = (b["rho"] - mu) / sigma_rho if self.centered_rho else b["rho"]
        out = {
            "delta": c["delta"] - 0.5 * np.sum(x ** 2)
            - (self.layout.n * b["log_sigma_delta"] if self.centered_delta else 0.0),
            "log_sigma_delta": c["log_sigma_delta"] - np.log1p((sigma_delta / HALF_CAUCHY_SCALE) ** 2)
            + b["log_sigma_delta"],
            "rho": c["rho"] - 0.5 * np.sum(xr ** 2)
            - (self.layout.G * np.sum(b["log_sigma_rho"]) if self.centered_rho else 0.0),
            "mu_rho": c["mu_rho"] - 0.5 * np.sum((mu - b["mu_rho_base"]) ** 2) / V
            + (np.sum(b["log_sigma_rho"]) if self.centered_rho else 0.0),
            "log_sigma_rho": c["log_sigma_rho"] + np.sum(-0.5 * (sigma_rho - sigma_base) ** 2 / V
                                                         + b["log_sigma_rho"])
            - K * log_ndtr(sigma_base / self.prior_sd),
            "mu_rho_base": c["mu_rho_base"] - 0.5 * b["mu_rho_base"] ** 2 / V,
            "log_sigma_rho_base": c["log_sigma_rho_base"]
            - np.log1p((sigma_base / HALF_CAUCHY_SCALE) ** 2) + b["log_sigma_rho_base"],
            "beta": c["beta"] - 0.5 * np.sum(b["beta"] ** 2) / V,
            "log_tau_N": c["log_tau_N"] + np.sum(-np.log1p((tau_N / HALF_CAUCHY_SCALE) ** 2)
                                                 + b["log_tau_N"]),
            "bias_raw": c["bias_raw"] - 0.5 * np.sum(b["bias_raw"] ** 2),
        }
        try:
            _, out["omega_free"] = self.kernel.corr_cholesky(
                np.ascontiguousarray(b["omega_free"]), K, self._diag_coef)
        except (ValueError, FloatingPointError):
            out["omega_free"] = np.nan
        return out

    def logp_grad(self, theta, with_grad=True):
        d, lay, V = self.data, self.layout, self.prior_var
        n, G, K, P = lay.n, lay.G, lay.K, lay.P
        (a0, a1), (sd0, _), (r0, r1), (m0, m1), (sr0, sr1), (mb0, _), (sb0, _), \
            (b0, b1), (t0, t1), (o0, o1), (e0, e1) = self._sl
        theta = np.asarray(theta, dtype=float)
        raw_delta = theta[a0:a1]
        s_d = float(theta[sd0])
        sigma_delta = math.exp(s_d)
        s_r = theta[sr0:sr1]
        sigma_rho = np.exp(s_r)
        if self.centered_rho:
            rho = theta[r0:r1].reshape(G, K)
            mt = theta[m0:m1]
            root_g = math.sqrt(G)
            mu = rho.mean(axis=0) + sigma_rho * mt / root_g
            xr = (rho - mu) / sigma_rho
            # the last term is the log-Jacobian of mu_rho
            prior_rho = -0.5 * float(xr.ravel() @ xr.ravel()) - (G - 1) * float(s_r.sum())
        else:
            mu = theta[m0:m1]
            xr = theta[r0:r1].reshape(G, K)
            rho = mu + sigma_rho * xr
            prior_rho = -0.5 * float(xr.ravel() @ xr.ravel())
        mu_base = float(theta[mb0])
        s_b = float(theta[sb0])
        sigma_base = math.exp(s_b)
        beta = theta[b0:b1].reshape(P, K)
        t = theta[t0:t1]
        tau_N = np.exp(t)
        q = np.log1p(tau_N * tau_N)
        tau = np.sqrt(q)
        mu_b = -0.5 * q
        free = theta[o0:o1]
        eps = theta[e0:e1].reshape(n, K)
        try:
            L, omega_term = self.kernel.corr_cholesky(free, K, self._diag_coef)
        except (ValueError, FloatingPointError):
            omega_term = np.nan
        if not math.isfinite(omega_term) or not math.isfinite(sigma_delta) \
                or not math.isfinite(sigma_base):
            self._raise_nonfinite(theta)
        L = np.asarray(L)
        if self.centered_delta:
            delta = raw_delta
            x = raw_delta / sigma_delta
            prior_delta = -0.5 * float(x @ x) - n * s_d
        else:
            delta = sigma_delta * raw_delta
            prior_delta = -0.5 * float(raw_delta @ raw_delta)
        buf = self._buf

        ll, n_clamped = self.kernel.nsum_loglik_grad(
            d.y, d.mask, d.w, d.gidx, d.z, delta, rho, beta, mu_b, tau, L, eps, self.eta_clamp,
            buf["g_delta"], buf["g_rho"], buf["g_beta"], buf["g_mu_b"], buf["g_tau"],
            buf["g_L"], buf["g_eps"])
        self.n_clamped += n_clamped

        dmu = mu - mu_base
        dsig = sigma_rho - sigma_base
        hc = HALF_CAUCHY_SCALE * HALF_CAUCHY_SCALE
        x_base = sigma_base / self.prior_sd
        log_phi = float(log_ndtr(x_base))
        lp = (self._const_total + ll + prior_delta
              - math.log1p(sigma_delta * sigma_delta / hc) + s_d
              + prior_rho
              - 0.5 * float(dmu @ dmu) / V
              - 0.5 * float(dsig @ dsig) / V + float(s_r.sum()) - K * log_phi
              - 0.5 * mu_base * mu_base / V
              - math.log1p(sigma_base * sigma_base / hc) + s_b
              - 0.5 * float(theta[b0:b1] @ theta[b0:b1]) / V
              + float(np.sum(t - np.log1p(tau_N * tau_N / hc)))
              + omega_term
              - 0.5 * float(theta[e0:e1] @ theta[e0:e1]))
        if not math.isfinite(lp):
            self._raise_nonfinite(theta, ll)
        if not with_grad:
            return lp, None

        g = np.empty(lay.dim)
        g_delta, g_rho = buf["g_delta"], buf["g_rho"]
        if self.centered_delta:
            g[a0:a1] = g_delta - raw_delta / (sigma_delta * sigma_delta)
            g[sd0] = float(x @ x) - n - 2 * sigma_delta ** 2 / (hc + sigma_delta ** 2) + 1.0
        else:
            g[a0:a1] = sigma_delta * g_delta - raw_delta
            g[sd0] = (sigma_delta * float(g_delta @ raw_delta)
                      - 2 * sigma_delta ** 2 / (hc + sigma_delta ** 2) + 1.0)
        if self.centered_rho:
            g_mu = (xr / sigma_rho).sum(axis=0) - dmu / V
            g[r0:r1] = (g_rho - xr / sigma_rho + g_mu / G).ravel()
            g[m0:m1] = g_mu * sigma_rho / root_g
            g[sr0:sr1] = ((xr * xr).sum(axis=0) - G + 1.0 - sigma_rho * dsig / V + 1.0
                          + g_mu * sigma_rho * mt / root_g)
        else:
            g[r0:r1] = (sigma_rho * g_rho - xr).ravel()
            g[m0:m1] = g_rho.sum(axis=0) - dmu / V
            g[sr0:sr1] = sigma_rho * ((g_rho * xr).sum(axis=0) - dsig / V) + 1.0
        g[mb0] = float(dmu.sum()) / V - mu_base / V
        mills = math.exp(-0.5 * x_base * x_base - 0.5 * _LOG2PI - log_phi)
        g[sb0] = sigma_base * (float(dsig.sum()) / V - K * mills / self.prior_sd
                               - 2 * sigma_base / (hc + sigma_base ** 2)) + 1.0
        g[b0:b1] = buf["g_beta"].ravel() - theta[b0:b1] / V
        # tau_N -> q -> (mu_b, tau)
        with np.errstate(divide="ignore", invalid="ignore"):
            g_q = -0.5 * buf["g_mu_b"] + np.where(tau > 0, buf["g_tau"] / (2.0 * tau), 0.0)
        tn2 = tau_N * tau_N
        g[t0:t1] = 2.0 * tn2 * (g_q / (1.0 + tn2) - 1.0 / (hc + tn2)) + 1.0
        if K > 1:
            g[o0:o1] = self.kernel.corr_cholesky_grad(free, K, buf["g_L"], self._diag_coef,
                                                      buf["g_free"])
        g[e0:e1] = buf["g_eps"].ravel() - theta[e0:e1]
        return lp, g

    def _raise_nonfinite(self, theta, ll=0.0):
        with np.errstate(all="ignore"):
            terms = self._block_terms(theta)
        terms["likelihood"] = ll
        bad = [k for k, val in terms.items() if not np.isfinite(val)] or ["unknown"]
        raise NsumModelError(f"non-finite log posterior in block(s): {', '.join(bad)}")

    def log_posterior(self, theta) -> float:
        return self.logp_grad(theta, with_grad=False)[0]

    def grad(self, theta) -> np.ndarray:
        return self.logp_grad(theta)[1]

    def initial_point(self, rng, jitter):
        """Data-informed start with uniform jitter.

        Centered blocks start at crude moment estimates (``rho`` at the log
        mean count per governorate, ``delta`` at each respondent's log total
        relative to the average); innovations, hyper-means and log-scales
        start at 0 before jittering.
        """
        lay, d = self.layout, self.data
        theta = np.zeros(lay.dim)
        for name in ("delta", "rho", "bias_raw"):
            sl = lay.slices[name]
            theta[sl] = rng.uniform(-jitter, jitter, sl.stop - sl.start)
        if lay.n == 0:
            return theta
        y = d.y * d.mask
        if self.centered_delta:
            tot = y.sum(axis=1) / np.maximum(d.mask.sum(axis=1), 1.0)
            start = np.clip(np.log((tot + 0.5) / (tot.mean() + 0.5)), -2.0, 2.0)
            theta[lay.slices["delta"]] += start
        if self.centered_rho:
            counts = np.zeros((lay.G, lay.K))
            asked = np.zeros((lay.G, lay.K))
            np.add.at(counts, d.gidx, y)
            np.add.at(asked, d.gidx, d.mask)
            start = np.log((counts + 0.5) / (asked + 1.0))
            theta[lay.slices["rho"]] += start.ravel()
        return theta


def log_posterior(params: NsumParams, dataset, **model_kw) -> float:
    """Log posterior density of ``params`` in unconstrained coordinates."""
    model = _as_model(dataset, **model_kw)
    return model.log_posterior(params.to_unconstrained(model.layout))


def grad_log_posterior(params: NsumParams, dataset, **model_kw) -> np.ndarray:
    model = _as_model(dataset, **model_kw)
    return model.grad(params.to_unconstrained(model.layout))


def _as_model(dataset, **model_kw):
    if isinstance(dataset, NsumModel):
        return dataset
    if isinstance(dataset, SurveyDataset):
        dataset = NsumData.from_dataset(dataset)
    return NsumModel(dataset, **model_kw)


# -- posterior ----------------------------------------------------------------

SCALAR_BLOCKS = ("delta", "sigma_delta", "rho", "mu_rho", "sigma_rho", "mu_rho_base",
                 "sigma_rho_base", "beta", "tau_N", "omega_chol")


@dataclass(frozen=True, eq=False)
class NsumPosterior:
    draws: dict                 # block -> (M, ...) arrays; "bias" thinned
    chains: int
    thin_bias: int
    diagnostics: list = field(default_factory=list)
    divergences: int = 0
    n_clamped: int = 0
    warnings: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def M(self):
        return self.draws["rho"].shape[0]

    @property
    def rho(self):
        return self.draws["rho"]

    @property
    def delta(self):
        return self.draws["delta"]

    @property
    def beta(self):
        return self.draws["beta"]

    def omega(self):
        L = self.draws["omega_chol"]
        return L @ np.swapaxes(L, -1, -2)

    def max_rhat(self):
        vals = [d["rhat"] for d in self.diagnostics if np.isfinite(d["rhat"])]
        return max(vals) if vals else np.nan

    @property
    def flagged(self):
        return bool(self.warnings)


def _nsum_chain(c, model, theta0s, config, seeds, thin):
    def collect(theta, d):
        p = model.unpack(theta)
        out = {name: np.asarray(getattr(p, name)) for name in SCALAR_BLOCKS}
        if d % thin == 0:
            out["bias"] = p.bias
        return out

    warm = []
    model.n_clamped = 0
    res = run_chain(model.logp_grad, theta0s[c], config, seeds[c], collect=collect,
                    on_warmup_end=lambda: warm.append(model.n_clamped))
    res.extras["n_clamped_warmup"] = warm[0]
    res.extras["n_clamped"] = model.n_clamped - warm[0]
    return res


def sample_posterior(data, config: SamplerConfig, threads=None, **model_kw) -> NsumPosterior:
    """Draw ``chains * draws_per_chain`` posterior samples with adaptive NUTS."""
    if isinstance(data, SurveyDataset):
        data = NsumData.from_dataset(data)
    model = NsumModel(data, **model_kw)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    theta0s = []
    for s in seeds:
        rng = np.random.Generator(np.random.PCG64(s.spawn(1)[0]))
        theta0s.append(model.initial_point(rng, config.init_jitter))
    thin = config.thin_bias
    fn = partial(_nsum_chain, model=model, theta0s=theta0s, config=config, seeds=seeds, thin=thin)
    threads = config.threads if threads is None else threads
    with np.errstate(over="ignore"):
        results = run_chains(fn, config.chains, threads)

    per_chain = {name: np.stack([r.extras[name] for r in results]) for name in SCALAR_BLOCKS}
    diag = []
    for name in SCALAR_BLOCKS:
        block = per_chain[name]
        if name == "omega_chol":
            block = block[..., np.tril_indices(data.K, -1)[0], np.tril_indices(data.K, -1)[1]]
        if block.ndim > 2 and block.shape[2:] and np.prod(block.shape[2:]) == 0:
            continue
        diag += diagnostics.summarize_block(block, name)
    bias = np.concatenate([r.extras["bias"] for r in results]) if data.n else np.zeros(
        (config.chains * len(range(0, config.draws_per_chain, thin)), 0, data.K))
    if thin == 1 and data.n:
        diag += diagnostics.summarize_block(np.stack([r.extras["bias"] for r in results]), "bias")
    draws = {name: v.reshape((v.shape[0] * v.shape[1],) + v.shape[2:]) for name, v in per_chain.items()}
    draws["bias"] = bias
    draws["accept_stat"] = np.concatenate([r.accept_stat for r in results])
    draws["divergent"] = np.concatenate([r.divergent for r in results])
    draws["treedepth"] = np.concatenate([r.treedepth for r in results])
    draws["lp"] = np.concatenate([r.logp for r in results])
    n_div = int(draws["divergent"].sum())
    n_clamped = int(sum(r.extras["n_clamped"] for r in results))
    n_clamped_warmup = int(sum(r.extras["n_clamped_warmup"] for r in results))

    notes = []
    total = config.chains * config.draws_per_chain
    if n_div > DIVERGENCE_WARN_RATE * total:
        notes.append(f"{n_div} of {total} transitions diverged")
    bad = [d["parameter"] for d in diag if not d["rhat"] <= RHAT_WARN]
    if bad:
        notes.append(f"R-hat above {RHAT_WARN} for {len(bad)} parameters (e.g. {', '.join(bad[:3])})")
    if n_clamped:
        notes.append(f"linear predictor clamped at {model.eta_clamp} in {n_clamped} "
                     "post-warmup evaluations")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    meta = {"step_size": [r.step_size for r in results], "K": data.K, "G": data.G, "n": data.n,
            "covariates": list(data.covariates), "age_center": data.age_center,
            "n_clamped_warmup": n_clamped_warmup, "centered": list(model.layout.centered)}
    return NsumPosterior(draws, config.chains, thin, diag, n_div, n_clamped, tuple(notes), meta)


def save_posterior_cache(path, post: NsumPosterior, meta=None):
    m = dict(post.meta)
    m.update(meta or {})
    m.update({"chains": post.chains, "thin_bias": post.thin_bias, "divergences": post.divergences,
              "n_clamped": post.n_clamped, "warnings": list(post.warnings)})
    write_cache(path, "nsum_posterior", post.draws, m)


def load_posterior_cache(path) -> NsumPosterior:
    arrays, meta = read_cache(path, "nsum_posterior")
    return NsumPosterior(arrays, meta["chains"], meta["thin_bias"], [], meta["divergences"],
                         meta["n_clamped"], tuple(meta["warnings"]), meta)


def export_draws_csv(directory, post: NsumPosterior, manifest: dict):
    """One long-format CSV per parameter block plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SCALAR_BLOCKS + ("bias",):
        arr = post.draws[name]
        with open(d / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["draw", "index", "value"])
            flat = arr.reshape(arr.shape[0], -1)
            idx = [",".join(map(str, i)) for i in np.ndindex(*arr.shape[1:])] or [""]
            for m in range(flat.shape[0]):
                for j, label in enumerate(idx):
                    w.writerow([m, label, repr(float(flat[m, j]))])
    with open(d / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
