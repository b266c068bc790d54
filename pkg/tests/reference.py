"""Loop-based reference pipeline used as an independent oracle in the tests.

Everything here is written with plain Python loops and lists: its own
Gaussian elimination, its own least squares and its own order statistics.
Folds and bootstrap multipliers are inputs, so the comparison isolates
the arithmetic from the randomness.
"""

import math


def gauss_solve(A, b):
    """Solve ``A x = b`` by Gaussian elimination with partial pivoting."""
    n = len(A)
    M = [list(map(float, A[i])) + [float(b[i])] for i in range(n)]
    for c in range(n):
        piv = max(range(c, n), key=lambda r: abs(M[r][c]))
        M[c], M[piv] = M[piv], M[c]
        if M[c][c] == 0.0:
            raise ZeroDivisionError("singular system")
        for r in range(c + 1, n):
            f = M[r][c] / M[c][c]
            for k in range(c, n + 1):
                M[r][k] -= f * M[c][k]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        s = M[r][n]
        for k in range(r + 1, n):
            s -= M[r][k] * x[k]
        x[r] = s / M[r][r]
    return x


def inverse(A):
    n = len(A)
    cols = [gauss_solve(A, [1.0 if i == j else 0.0 for i in range(n)]) for j in range(n)]
    return [[cols[j][i] for j in range(n)] for i in range(n)]


def ols_predict(Xtr, ytr, Xte):
    """Least squares with an intercept, via the normal equations."""
    Z = [[1.0] + list(map(float, row)) for row in Xtr]
    p = len(Z[0])
    A = [[sum(z[i] * z[j] for z in Z) for j in range(p)] for i in range(p)]
    b = [sum(z[i] * yv for z, yv in zip(Z, ytr)) for i in range(p)]
    beta = gauss_solve(A, b)
    return [beta[0] + sum(beta[k + 1] * row[k] for k in range(p - 1)) for row in Xte]


def crossfit(X, y, folds):
    n = len(y)
    out = [0.0] * n
    for fold in folds:
        test = set(int(i) for i in fold)
        train = [i for i in range(n) if i not in test]
        pred = ols_predict([X[i] for i in train], [y[i] for i in train],
                           [X[i] for i in sorted(test)])
        for i, v in zip(sorted(test), pred):
            out[i] = v
    return out


def clamp(v, eps):
    return [min(max(x, eps), 1.0 - eps) for x in v]


def grad(W, a, mua, resp, muresp, w):
    n, p = len(W), len(W[0])
    return [sum(w[i] * W[i][j] * (a[i] - mua[i]) * (resp[i] - muresp[i]) for i in range(n)) / n
            for j in range(p)]


def hess(W, a, mua, w):
    n, p = len(W), len(W[0])
    return [[sum(w[i] * (a[i] - mua[i]) ** 2 * W[i][j] * W[i][k] for i in range(n)) / n
             for k in range(p)] for j in range(p)]


def sub(v, m):
    return [v[i] for i in m]


def subm(A, m):
    return [[A[i][j] for j in m] for i in m]


def pseudo(y, a2, W2, m2, theta2):
    out = []
    for i in range(len(y)):
        s = sum(W2[i][j] * t for j, t in zip(m2, theta2))
        out.append(y[i] + s * ((1.0 if s > 0 else 0.0) - a2[i]))
    return out


def maxdev(A, B):
    if isinstance(A[0], list):
        return max(abs(A[i][j] - B[i][j]) for i in range(len(A)) for j in range(len(A[0])))
    return max(abs(x - y) for x, y in zip(A, B))


def order_stat(values, alpha):
    v = sorted(values)
    k = math.ceil((1.0 - alpha) * len(v) * (1.0 - 1e-12))
    return 0.0 if k == 0 else v[k - 1]


def pipeline(x1, a1, x2, a2, y, W1, W2, folds, m2, m1, multipliers, alpha, eps=0.01):
    """Every quantity of the fit, bootstrap and intervals, recomputed by loops.

    ``W1``/``W2`` are the stage bases (lists of rows), ``m2``/``m1`` fixed
    0-based models and ``multipliers`` a list of multiplier vectors.
    """
    n = len(y)
    ones = [1.0] * n
    H2rows = [list(x1[i]) + [a1[i]] + list(x2[i]) for i in range(n)]
    mu2a = clamp(crossfit(H2rows, a2, folds), eps)
    mu2y = crossfit(H2rows, y, folds)
    G2 = grad(W2, a2, mu2a, y, mu2y, ones)
    Hs2 = hess(W2, a2, mu2a, ones)
    th2 = gauss_solve(subm(Hs2, m2), sub(G2, m2))
    ps = pseudo(y, a2, W2, m2, th2)
    mu1a = clamp(crossfit(x1, a1, folds), eps)
    mu1y = crossfit(x1, ps, folds)
    G1 = grad(W1, a1, mu1a, ps, mu1y, ones)
    Hs1 = hess(W1, a1, mu1a, ones)
    th1 = gauss_solve(subm(Hs1, m1), sub(G1, m1))

    root_n = math.sqrt(n)
    d = {"dG2": [], "dH2": [], "dG1": [], "dH1": []}
    tb = {2: [], 1: []}
    for w in multipliers:
        g2b = grad(W2, a2, mu2a, y, mu2y, w)
        h2b = hess(W2, a2, mu2a, w)
        t2b = gauss_solve(subm(h2b, m2), sub(g2b, m2))
        psb = pseudo(y, a2, W2, m2, t2b)
        g1b = grad(W1, a1, mu1a, psb, mu1y, w)
        h1b = hess(W1, a1, mu1a, w)
        t1b = gauss_solve(subm(h1b, m1), sub(g1b, m1))
        d["dG2"].append(root_n * maxdev(g2b, G2))
        d["dH2"].append(root_n * maxdev(h2b, Hs2))
        d["dG1"].append(root_n * maxdev(g1b, G1))
        d["dH1"].append(root_n * maxdev(h1b, Hs1))
        tb[2].append(t2b)
        tb[1].append(t1b)

    out = {"G2": G2, "H2": Hs2, "theta2": th2, "pseudo": ps, "G1": G1, "H1": Hs1,
           "theta1": th1, "draws": d, "mu": {"propensity2": mu2a, "outcome2": mu2y,
                                             "propensity1": mu1a, "outcome1": mu1y}}
    for s, th, Hs, m in ((2, th2, Hs2, m2), (1, th1, Hs1, m1)):
        l1 = sum(abs(t) for t in th)
        dg, dh = d[f"dG{s}"], d[f"dH{s}"]
        r_comb = order_stat([g + l1 * h for g, h in zip(dg, dh)], alpha) / root_n
        r_cond = order_stat(dg, alpha) / root_n
        inv = inverse(subm(Hs, m))
        k = len(m)
        out[f"stage{s}"] = {
            "radius_combined": r_comb,
            "radius_conditional": r_cond,
            "hyperrect": [sum(abs(inv[j][c]) for c in range(k)) * r_comb for j in range(k)],
            "coord": [abs(inv[j][j]) * r_comb for j in range(k)],
            "conditional": [abs(inv[j][j]) * r_cond for j in range(k)],
            "naive": [order_stat([abs(t[j] - th[j]) for t in tb[s]], alpha) for j in range(k)],
        }
    return out
