"""Independent reference implementations used as test oracles.

Deliberately written with plain Python scalars and loops, sharing no code
with the package, so agreement is meaningful.
"""

import math


def f_comp_scalar(z, W1, b1, W2, b2):
    hidden = []
    for j in range(len(b1)):
        s = b1[j]
        for i in range(len(z)):
            s += z[i] * W1[i][j]
        hidden.append(math.tanh(s))
    out = []
    for k in range(len(b2)):
        s = b2[k]
        for j in range(len(hidden)):
            s += hidden[j] * W2[j][k]
        out.append(s)
    return out


def latent_rhs_scalar(z, r_p, r_d, c, W1, b1, W2, b2):
    """dz/dt from  c dz/dt = -z/r_d - r_p z + f_comp(z), term by term."""
    f = f_comp_scalar(z, W1, b1, W2, b2)
    out = []
    for i in range(len(z)):
        decay = -z[i] / r_d
        imped = -r_p * z[i]
        out.append((decay + imped + f[i]) / c)
    return out


def bhs_brute(errors):
    n = len(errors)
    pct = []
    for k in (5, 10, 15):
        hits = 0
        for e in errors:
            if abs(e) <= k:
                hits += 1
        pct.append(100.0 * hits / n)
    if pct[0] >= 60 and pct[1] >= 85 and pct[2] >= 95:
        g = "A"
    elif pct[0] >= 50 and pct[1] >= 75 and pct[2] >= 90:
        g = "B"
    elif pct[0] >= 40 and pct[1] >= 65 and pct[2] >= 85:
        g = "C"
    else:
        g = "D"
    return pct[0], pct[1], pct[2], g


def aami_brute(errors):
    n = len(errors)
    mean = math.fsum(errors) / n
    var = math.fsum((e - mean) ** 2 for e in errors) / (n - 1)
    sd = math.sqrt(var)
    return mean, sd, abs(mean) <= 5 and sd <= 8


def pearson_scalar(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_scalar(X, W, U, b):
    """Single-layer LSTM on one sequence; W[g] is (I, H), U[g] is (H, H)."""
    H = len(b["i"])
    h = [0.0] * H
    c = [0.0] * H
    for x in X:
        pre = {}
        for g in "ifgo":
            row = []
            for j in range(H):
                s = b[g][j]
                for i in range(len(x)):
                    s += x[i] * W[g][i][j]
                for i in range(H):
                    s += h[i] * U[g][i][j]
                row.append(s)
            pre[g] = row
        c = [sigmoid(pre["f"][j]) * c[j] + sigmoid(pre["i"][j]) * math.tanh(pre["g"][j]) for j in range(H)]
        h = [sigmoid(pre["o"][j]) * math.tanh(c[j]) for j in range(H)]
    return h
