"""Pure numpy implementation of the conditional-logistic stratum kernel.

Strata sharing the same (size, number of cases) are processed together, so
the recursion loops only over subject position and the work inside is
vectorized across strata.
"""
import numpy as np

_RESCALE_HI = 1e150
_RESCALE_LO = 1e-150


def clogit_strata(feats, case, offsets, beta, want_hess=True):
    """Log-likelihood, score and Hessian of the conditional logistic model.

    Parameters
    ----------
    feats : (N, D) float array
        Features of each subject, strata stored contiguously.
    case : (N,) int8 array
        1 for cases, 0 for controls.
    offsets : (S + 1,) int64 array
        Stratum ``j`` owns rows ``offsets[j]:offsets[j + 1]``.
    beta : (D,) float array
    want_hess : bool

    Returns
    -------
    loglik : (S,) per-stratum log-likelihood
    score : (S, D) per-stratum score
    hess : (D, D) Hessian summed over strata (zeros if not requested)
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    case = np.asarray(case, dtype=np.int8)
    offsets = np.asarray(offsets, dtype=np.int64)
    beta = np.asarray(beta, dtype=np.float64)
    n_strata = offsets.size - 1
    D = feats.shape[1]
    loglik = np.zeros(n_strata)
    score = np.zeros((n_strata, D))
    hess = np.zeros((D, D))
    if n_strata == 0:
        return loglik, score, hess

    eta_all = feats @ beta
    sizes = np.diff(offsets)
    ncase = np.add.reduceat(case.astype(np.int64), offsets[:-1])
    ncase[sizes == 0] = 0
    shapes = sizes * (sizes.max() + 1) + ncase
    for key in np.unique(shapes):
        idx = np.flatnonzero(shapes == key)
        N, n = int(sizes[idx[0]]), int(ncase[idx[0]])
        if n == 0 or n == N:
            # degenerate stratum: a single possible case set, contributes nothing
            continue
        rows = offsets[idx][:, None] + np.arange(N)
        F = feats[rows]
        eta = eta_all[rows]
        y = case[rows].astype(np.float64)
        shift = eta.max(axis=1)
        r = np.exp(eta - shift[:, None])
        G = idx.size
        E = np.zeros((G, n + 1))
        E[:, 0] = 1.0
        E1 = np.zeros((G, n + 1, D))
        E2 = np.zeros((G, n + 1, D, D)) if want_hess else None
        logscale = np.zeros(G)
        for k in range(N):
            rk = r[:, k]
            xk = F[:, k, :]
            j = min(k + 1, n)
            if want_hess:
                t = (E2[:, :j]
                     + xk[:, None, :, None] * E1[:, :j, None, :]
                     + E1[:, :j, :, None] * xk[:, None, None, :]
                     + (xk[:, :, None] * xk[:, None, :])[:, None] * E[:, :j, None, None])
                E2[:, 1:j + 1] += rk[:, None, None, None] * t
            E1[:, 1:j + 1] += rk[:, None, None] * (E1[:, :j] + xk[:, None, :] * E[:, :j, None])
            E[:, 1:j + 1] += rk[:, None] * E[:, :j]
            c = E.max(axis=1)
            bad = (c > _RESCALE_HI) | (c < _RESCALE_LO)
            if bad.any():
                c = np.where(bad, c, 1.0)
                E /= c[:, None]
                E1 /= c[:, None, None]
                if want_hess:
                    E2 /= c[:, None, None, None]
                logscale += np.log(c)
        En = E[:, n]
        log_denom = np.log(En) + logscale + n * shift
        loglik[idx] = (eta * y).sum(axis=1) - log_denom
        mu = E1[:, n] / En[:, None]
        score[idx] = (F * y[:, :, None]).sum(axis=1) - mu
        if want_hess:
            m2 = E2[:, n] / En[:, None, None]
            cov = m2 - mu[:, :, None] * mu[:, None, :]
            hess -= cov.sum(axis=0)
    return loglik, score, hess
