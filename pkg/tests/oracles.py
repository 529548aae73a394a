"""Independent dense reference implementations used as test oracles.

Written from the algorithm description with plain numpy on dense (n, p)
arrays; nothing here imports the package.
"""

import math

import numpy as np


def abs_corr(X, r):
    """|Pearson correlation| of every column of X with r; 0 for constant columns."""
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        x = X[:, j]
        if x.std() == 0 or r.std() == 0:
            continue
        out[j] = abs(np.corrcoef(x, r)[0, 1])
    return out


def top_k(scores, k):
    """Indices of the k largest scores, ties to the lower index, plus the best excluded score."""
    ranked = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    rest = ranked[k:]
    return ranked[:k], (float(scores[rest[0]]) if rest else 0.0)


def nll(y, mu, eta):
    return float(np.mean(0.5 * math.log(2 * math.pi) + eta + (y - mu) ** 2 / (2 * np.exp(2 * eta))))


def ref_fit(Xtr, ytr, Xva, yva, p_batch, m_batch, b_max=50, b_stop=2, step_mode="adaptive",
            nu=0.1, lam=0.1, nu_sigma=0.05, sigma_enabled=True):
    """Returns dict with path [(m, par, j, d_intercept, d_slope)], valid losses, m_stop, coefs."""
    n, p = Xtr.shape
    b0 = ytr.mean()
    g0 = math.log(ytr.std(ddof=1))
    mu, eta = np.full(n, b0), np.full(n, g0)
    mu_v, eta_v = np.full(len(yva), b0), np.full(len(yva), g0)
    beta, gamma = np.zeros(p), np.zeros(p)
    beta0, gamma0 = b0, g0
    best = nll(yva, mu_v, eta_v)
    stale, m = 0, 0
    path, vloss, tloss = [], [], []

    def resid(par):
        s2 = np.exp(2 * np.clip(eta, -15, 15))
        return (ytr - mu) / s2 if par == "mu" else (ytr - mu) ** 2 / s2 - 1

    pars = ["mu", "sigma"] if sigma_enabled else ["mu"]
    for _k in range(b_max):
        batch, cstop = {}, {}
        snapshot = {par: resid(par) for par in pars}
        for par in pars:
            idx, cstop[par] = top_k(abs_corr(Xtr, snapshot[par]), p_batch)
            batch[par] = sorted(idx)
        flag = {"mu": False, "sigma": not sigma_enabled}
        first = m
        for _l in range(m_batch):
            if flag["mu"] and flag["sigma"]:
                break
            m += 1
            for par in ("mu", "sigma"):
                if flag[par]:
                    continue
                r = resid(par)
                cols = batch[par]
                c = abs_corr(Xtr[:, cols], r)
                pos = int(np.argmax(c))
                if c[pos] < cstop[par]:
                    flag[par] = True
                    continue
                j = cols[pos]
                x = Xtr[:, j]
                slope = np.sum((x - x.mean()) * (r - r.mean())) / np.sum((x - x.mean()) ** 2)
                icpt = r.mean() - slope * x.mean()
                h = icpt + slope * x
                if step_mode == "fixed":
                    step = nu
                elif par == "mu":
                    sig = np.exp(np.clip(eta, -15, 15))
                    den = np.sum(h ** 2 / sig ** 2)
                    step = lam * np.sum(h ** 2) / den if den > 0 else lam
                else:
                    step = nu_sigma
                if par == "mu":
                    mu = mu + step * h
                    mu_v = mu_v + step * (icpt + slope * Xva[:, j])
                    beta0 += step * icpt
                    beta[j] += step * slope
                else:
                    eta = eta + step * h
                    eta_v = eta_v + step * (icpt + slope * Xva[:, j])
                    gamma0 += step * icpt
                    gamma[j] += step * slope
                path.append((m, par, j, step * icpt, step * slope))
            vloss.append(nll(yva, mu_v, np.clip(eta_v, -15, 15)))
            tloss.append(nll(ytr, mu, np.clip(eta, -15, 15)))
        batch_best = min(vloss[first:m]) if m > first else math.inf
        if batch_best < best:
            best, stale = batch_best, 0
        else:
            stale += 1
            if stale >= b_stop:
                break
    m_stop = int(np.argmin(vloss)) + 1
    return {"path": path, "valid_loss": vloss, "train_loss": tloss, "m_stop": m_stop,
            "offsets": (b0, g0)}


def coefficients_at(result, p, upto):
    b0, g0 = result["offsets"]
    beta, gamma = np.zeros(p), np.zeros(p)
    for m, par, j, di, ds in result["path"]:
        if m > upto:
            break
        if par == "mu":
            b0 += di
            beta[j] += ds
        else:
            g0 += di
            gamma[j] += ds
    return b0, g0, beta, gamma
