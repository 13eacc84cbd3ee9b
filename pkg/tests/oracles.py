"""Brute-force reference implementations used as test oracles.

Plain Python loops and math.fsum only; nothing here imports windtunnel.
"""

import math


def mean(xs):
    return math.fsum(xs) / len(xs)


def pearson(a, b):
    ma, mb = mean(a), mean(b)
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def dtw_table(a, b):
    """Full (n+1) x (m+1) accumulated-cost table with absolute-difference cost."""
    n, m = len(a), len(b)
    D = [[math.inf] * (m + 1) for _ in range(n + 1)]
    D[0][0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = abs(a[i - 1] - b[j - 1]) + min(D[i - 1][j], D[i][j - 1], D[i - 1][j - 1])
    return D


def dtw(a, b):
    return dtw_table(a, b)[len(a)][len(b)]


def market_ranking(real, generated, universe):
    """Exhaustive pairwise count over every candidate, ties worth half."""
    gen = pearson(real, generated)
    coefs = [gen] + [pearson(real, u) for u in universe]
    score = 0.0
    for c in coefs:
        if c < gen:
            score += 1.0
        elif c == gen:
            score += 0.5
    # the generated path compared with itself counts fully
    score += 0.5
    return score / len(coefs)


def annualized_return(nav, ppy):
    return (nav[-1] / nav[0]) ** (ppy / (len(nav) - 1)) - 1.0


def max_drawdown(nav):
    worst = 0.0
    for i in range(len(nav)):
        for j in range(i, len(nav)):
            worst = min(worst, nav[j] / nav[i] - 1.0)
    return worst


def sharpe(returns, ppy):
    m = mean(returns)
    var = math.fsum((r - m) ** 2 for r in returns) / (len(returns) - 1)
    return m / math.sqrt(var) * math.sqrt(ppy)


def quantile_linear(xs, p):
    """Linear-interpolation sample quantile (numpy's default method)."""
    s = sorted(xs)
    pos = p * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def sample_std(xs):
    m = mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def alpha_bar(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def long_short_nav(returns, weights_by_step):
    """Compound a list of per-step weight vectors against per-step return vectors."""
    nav = [1.0]
    for w, r in zip(weights_by_step, returns):
        nav.append(nav[-1] * (1.0 + math.fsum(wi * ri for wi, ri in zip(w, r))))
    return nav
