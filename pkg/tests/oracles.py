"""Independent reference computations used by the tests.

Everything here is written with explicit loops or finite differences and
shares no code with the package beyond plain numpy.
"""

import math

import numpy as np


def central_diff(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Elementwise ``|a - n| / max(|a| + |n|, floor)``, maximised."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def conv_loops(x, w, stride):
    """Valid NHWC convolution by six nested loops (plus the channel sum)."""
    N, H, W, C = x.shape
    F, _, _, O = w.shape
    Ho = (H - F) // stride + 1
    Wo = (W - F) // stride + 1
    out = np.zeros((N, Ho, Wo, O))
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for o in range(O):
                    s = 0.0
                    for a in range(F):
                        for b in range(F):
                            for c in range(C):
                                s += x[n, i * stride + a, j * stride + b, c] * w[a, b, c, o]
                    out[n, i, j, o] = s
    return out


def maxpool_loops(x, size, stride):
    N, H, W, C = x.shape
    Ho = (H - size) // stride + 1
    Wo = (W - size) // stride + 1
    out = np.zeros((N, Ho, Wo, C))
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = -math.inf
                    for a in range(size):
                        for b in range(size):
                            best = max(best, x[n, i * stride + a, j * stride + b, c])
                    out[n, i, j, c] = best
    return out


def dense_loops(x, w):
    N, I = x.shape
    O = w.shape[1]
    out = np.zeros((N, O))
    for n in range(N):
        for o in range(O):
            out[n, o] = sum(x[n, i] * w[i, o] for i in range(I))
    return out


def forward_loops(net, weights, x):
    """Straight-loop forward pass over a list of LayerSpec."""
    wi = 0
    x = np.array(x, dtype=np.float64)
    for layer in net:
        if layer.kind == "conv2d":
            x = conv_loops(x, weights[wi], layer.stride)
            wi += 1
        elif layer.kind == "dense":
            x = dense_loops(x, weights[wi])
            wi += 1
        elif layer.kind == "relu":
            x = np.vectorize(lambda t: t if t > 0 else 0.0)(x)
        elif layer.kind == "maxpool2d":
            x = maxpool_loops(x, layer.filter_size, layer.stride)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
    return x


def cross_entropy_loops(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(t - m) for t in row))
        total += lse - row[y]
    return total / len(labels)


def kernel_index_map(M, F, I, O):
    """Brute-force reshape: W[f1, f2, i, o] = M[f1*F + f2, i*O + o]."""
    W = np.zeros((F, F, I, O))
    for f1 in range(F):
        for f2 in range(F):
            for i in range(I):
                for o in range(O):
                    W[f1, f2, i, o] = M[f1 * F + f2, i * O + o]
    return W


def softmax_list(z):
    m = max(z)
    e = [math.exp(t - m) for t in z]
    s = sum(e)
    return [t / s for t in e]


def gini(values) -> float:
    """Gini coefficient of a non-negative vector (mean absolute difference form)."""
    v = np.asarray(values, dtype=np.float64)
    if v.sum() == 0:
        return 0.0
    diff = np.abs(v[:, None] - v[None, :]).sum()
    return float(diff / (2 * len(v) ** 2 * v.mean()))
