"""Independent reference computations used by the tests.

Nothing here calls the package's conversion or EM code; densities come from
scipy.stats and sums from plain numpy.
"""
import numpy as np
from scipy import stats
from scipy.special import logsumexp


def joint_logpdf_grid(model, y, grid):
    """log p(x, y) for every row of ``grid`` (x = (t; w)) from the inverse parameters."""
    out = []
    for k in range(model.K):
        A = np.hstack([model.A_t[k], model.A_w[k]])
        c = np.concatenate([model.c_t[k], model.c_w[k]])
        L = len(c)
        G = np.zeros((L, L))
        Lt = model.c_t.shape[1]
        G[:Lt, :Lt] = model.Gamma_t[k]
        G[Lt:, Lt:] = model.Gamma_w[k]
        lx = stats.multivariate_normal(c, G).logpdf(grid).reshape(len(grid))
        means = grid @ A.T + model.b[k]
        ly = stats.norm(means, np.sqrt(model.sigma2[k])).logpdf(y).sum(axis=1)
        out.append(model.log_weights[k] + lx + ly)
    return logsumexp(np.vstack(out), axis=0)


def make_grid(model, y, n=801, width=9.0):
    """Tensor grid covering every component's conditional p(x | y, k) generously."""
    lo, hi = [], []
    L = model.c_t.shape[1] + model.c_w.shape[1]
    for k in range(model.K):
        A = np.hstack([model.A_t[k], model.A_w[k]])
        c = np.concatenate([model.c_t[k], model.c_w[k]])
        G = np.zeros((L, L))
        Lt = model.c_t.shape[1]
        G[:Lt, :Lt] = model.Gamma_t[k]
        G[Lt:, Lt:] = model.Gamma_w[k]
        S = np.linalg.inv(np.linalg.inv(G) + A.T @ A / model.sigma2[k][0])
        m = S @ (np.linalg.solve(G, c) + A.T @ (y - model.b[k]) / model.sigma2[k][0])
        sd = np.sqrt(np.diag(S))
        lo.append(m - width * sd)
        hi.append(m + width * sd)
    lo, hi = np.min(lo, axis=0), np.max(hi, axis=0)
    axes = [np.linspace(lo[i], hi[i], n) for i in range(L)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.column_stack([m.ravel() for m in mesh])


def cell_volume(axes):
    return float(np.prod([a[1] - a[0] for a in axes]))


def conditional_on_grid(model, y, n=801):
    """Normalised p(x | y) on a grid by Riemann summation of the joint."""
    axes, grid = make_grid(model, y, n)
    lp = joint_logpdf_grid(model, y, grid)
    p = np.exp(lp - lp.max())
    p /= p.sum() * cell_volume(axes)
    return axes, grid, p


def mixture_of_linear_experts_em(Y, T, q0, n_iter):
    """Textbook EM for a Gaussian-gated mixture of linear regressions of Y on T
    with one isotropic noise variance per expert; returns the log-likelihood trace."""
    N, D = Y.shape
    L = T.shape[1]
    K = q0.shape[1]
    q = q0.copy()
    X1 = np.hstack([T, np.ones((N, 1))])
    trace = []
    for _ in range(n_iter + 1):
        pis, mus, covs, coefs, vars_ = [], [], [], [], []
        for k in range(K):
            r = q[:, k]
            pis.append(r.sum() / N)
            mu = r @ T / r.sum()
            mus.append(mu)
            covs.append(((T - mu) * r[:, None]).T @ (T - mu) / r.sum())
            W = np.sqrt(r)[:, None]
            coef = np.linalg.lstsq(X1 * W, Y * W, rcond=None)[0]
            coefs.append(coef)
            res = Y - X1 @ coef
            vars_.append(np.sum(r[:, None] * res**2) / (D * r.sum()))
        logp = np.column_stack([
            np.log(pis[k]) + stats.multivariate_normal(mus[k], covs[k]).logpdf(T).reshape(N)
            + stats.norm(X1 @ coefs[k], np.sqrt(vars_[k])).logpdf(Y).sum(axis=1)
            for k in range(K)])
        tot = logsumexp(logp, axis=1)
        trace.append(float(tot.sum()))
        q = np.exp(logp - tot[:, None])
    return trace
