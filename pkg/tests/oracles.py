"""Independent reference computations used by the test-suite.

None of these import the code under test beyond plain data containers.
"""

import math
from collections import Counter
from fractions import Fraction

import mpmath
import numpy as np

mpmath.mp.dps = 50


def central_difference(fn, arrays, step=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def mp_softmax(values):
    xs = [mpmath.mpf(repr(float(v))) for v in values]
    es = [mpmath.e ** x for x in xs]
    s = mpmath.fsum(es)
    return [float(e / s) for e in es]


def mp_cross_entropy(a, b):
    return float(-mpmath.fsum(mpmath.mpf(repr(float(x))) * mpmath.log(mpmath.mpf(repr(float(y)))) for x, y in zip(a, b)))


def brute_v_measure(truth, pred):
    """Homogeneity/completeness/V from explicit pair counting over Python lists."""
    n = len(truth)
    joint = Counter(zip(truth, pred))
    ct = Counter(truth)
    cp = Counter(pred)

    def h(counter):
        return -sum((c / n) * math.log(c / n) for c in counter.values())

    h_c_k = -sum((nck / n) * math.log(nck / cp[k]) for (c, k), nck in joint.items())
    h_k_c = -sum((nck / n) * math.log(nck / ct[c]) for (c, k), nck in joint.items())
    hc, hk = h(ct), h(cp)
    hom = 1.0 if hc == 0 else 1 - h_c_k / hc
    com = 1.0 if hk == 0 else 1 - h_k_c / hk
    v = 0.0 if hom + com == 0 else 2 * hom * com / (hom + com)
    return hom, com, v


def mlp_forward(x, weights, biases):
    """Plain-numpy MLP: relu between layers, none after the last."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.maximum(h, 0)
    return h


def ema_closed_form(theta_t0, theta_s, m, k):
    mk = float(Fraction(m).limit_denominator(10**12) ** k) if m not in (0, 1) else float(m**k)
    return mk * theta_t0 + (1 - mk) * theta_s
