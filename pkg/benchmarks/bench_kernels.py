"""Time the compiled kernels against the NumPy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 500] [--K 38] [--G 12] [--repeat 50]

Prints mean wall time per call for each kernel and backend, the speed-up,
and the largest absolute difference between the two backends' outputs.
"""

import argparse
import timeit

import numpy as np

from dpnsum.kernels import compiled_backend, python_backend
from dpnsum.nsum import NsumData, NsumModel


def kernel_inputs(n, K, G, P, seed):
    rng = np.random.default_rng(seed)
    gidx = rng.integers(0, G, n).astype(np.intp)
    y = rng.poisson(2.0, (n, K)).astype(float)
    mask = (rng.random((n, K)) > 0.05).astype(float)
    w = rng.uniform(0.5, 1.5, n)
    z = rng.standard_normal((n, P))
    delta = rng.normal(5.0, 0.5, n)
    rho = rng.normal(-5.0, 0.5, (G, K))
    beta = rng.normal(0.0, 0.05, (P, K))
    tau = rng.uniform(0.2, 0.6, K)
    mu_b = -0.5 * tau ** 2
    free = rng.uniform(-0.5, 0.5, K * (K - 1) // 2)
    diag = np.ones(K)
    eps = rng.standard_normal((n, K))
    return dict(y=y, mask=mask, w=w, gidx=gidx, z=z, delta=delta, rho=rho, beta=beta,
                mu_b=mu_b, tau=tau, free=free, diag=diag, eps=eps)


def loglik_call(backend, a, L):
    n, K = a["y"].shape
    G, P = a["rho"].shape[0], a["z"].shape[1]
    bufs = [np.zeros(n), np.zeros((G, K)), np.zeros((P, K)), np.zeros(K), np.zeros(K),
            np.zeros((K, K)), np.zeros((n, K))]
    out = backend.nsum_loglik_grad(a["y"], a["mask"], a["w"], a["gidx"], a["z"], a["delta"],
                                   a["rho"], a["beta"], a["mu_b"], a["tau"], L, a["eps"],
                                   30.0, *bufs)
    return out, bufs


def timed(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--K", type=int, default=38)
    ap.add_argument("--G", type=int, default=12)
    ap.add_argument("--P", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    compiled = compiled_backend()
    backends = {"python": python_backend}
    if compiled is None:
        print("compiled extension not built; timing the NumPy fallback only")
    else:
        backends["cython"] = compiled
    a = kernel_inputs(args.n, args.K, args.G, args.P, args.seed)
    L, _ = python_backend.corr_cholesky(a["free"], args.K, a["diag"])

    print(f"n={args.n} K={args.K} G={args.G} P={args.P}, best of {args.repeat}")
    print(f"{'kernel':<22}{'backend':<10}{'time (us)':>12}")
    results = {}
    for name, be in backends.items():
        gL = np.zeros((args.K, args.K))
        out = np.zeros_like(a["free"])
        cases = {
            "nsum_loglik_grad": lambda be=be: loglik_call(be, a, L),
            "corr_cholesky": lambda be=be: be.corr_cholesky(a["free"], args.K, a["diag"]),
            "corr_cholesky_grad": lambda be=be: be.corr_cholesky_grad(a["free"], args.K, gL,
                                                                      a["diag"], out),
        }
        for kname, fn in cases.items():
            t = timed(fn, args.repeat)
            results[(kname, name)] = t
            print(f"{kname:<22}{name:<10}{t * 1e6:>12.1f}")

    model = NsumModel(NsumData(a["y"], a["mask"], a["w"], a["gidx"], a["z"], args.G))
    theta = model.initial_point(np.random.default_rng(args.seed), 0.1)
    for name, be in backends.items():
        m = NsumModel(model.data, backend=be)
        t = timed(lambda m=m: m.logp_grad(theta), args.repeat)
        results[("logp_grad", name)] = t
        print(f"{'model logp_grad':<22}{name:<10}{t * 1e6:>12.1f}")

    if compiled is not None:
        print("\nspeed-up (python / cython):")
        for kname in ("nsum_loglik_grad", "corr_cholesky", "corr_cholesky_grad", "logp_grad"):
            print(f"  {kname:<22}{results[(kname, 'python')] / results[(kname, 'cython')]:6.1f}x")
        (ll_p, _), bufs_p = loglik_call(python_backend, a, L)
        (ll_c, _), bufs_c = loglik_call(compiled, a, L)
        diff = max([abs(ll_p - ll_c)] + [float(np.max(np.abs(p - c))) for p, c in zip(bufs_p, bufs_c)])
        print(f"max |python - cython| over log-likelihood and gradients: {diff:.2e}")


if __name__ == "__main__":
    main()
