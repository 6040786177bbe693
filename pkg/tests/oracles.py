"""Scalar-loop reference implementations used as independent oracles."""

import math

import numpy as np


def softmax_list(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    z = math.fsum(e)
    return [x / z for x in e]


def pooling(features, attn_weight):
    """Returns (P, S) for C×H×W features and a K×C×1×1 attention kernel."""
    c = features.shape[0]
    flat = features.reshape(c, -1)
    k, hw = attn_weight.shape[0], flat.shape[1]
    S = np.zeros((k, hw))
    for i in range(k):
        logits = [math.fsum(attn_weight[i, ch, 0, 0] * flat[ch, p] for ch in range(c)) for p in range(hw)]
        S[i] = softmax_list(logits)
    P = np.zeros((c, k))
    for ch in range(c):
        for i in range(k):
            P[ch, i] = math.fsum(flat[ch, p] * S[i, p] for p in range(hw))
    return P, S


def knn(P, k_nn):
    c, n = P.shape
    out = []
    for i in range(n):
        dists = []
        for j in range(n):
            if j != i:
                dists.append((math.sqrt(math.fsum((P[ch, i] - P[ch, j]) ** 2 for ch in range(c))), j))
        dists.sort()
        out.append([j for _, j in dists[:k_nn]])
    return np.array(out)


def mlp(x, layers):
    """``layers`` is a list of (W, b) in row-vector convention with relu between."""
    for n, (w, b) in enumerate(layers):
        x = [math.fsum(x[i] * w[i, o] for i in range(len(x))) + b[o] for o in range(w.shape[1])]
        if n < len(layers) - 1:
            x = [max(v, 0.0) for v in x]
    return np.array(x)


def edgeconv(x, neighbors, layers):
    c, n = x.shape
    outs = []
    for i in range(n):
        msgs = [mlp(np.concatenate([x[:, i], x[:, j] - x[:, i]]), layers) for j in neighbors[i]]
        outs.append(np.max(msgs, axis=0))
    return np.array(outs).T


def adjacency(E):
    c, n = E.shape
    return np.array([[math.fsum(E[ch, i] * E[ch, j] for ch in range(c)) for j in range(n)] for i in range(n)])


def reweight(P, w):
    c, k = P.shape
    return np.array([[w[ch] * P[ch, i] for i in range(k)] for ch in range(c)])


def refine(P1, A):
    c, k = P1.shape
    cols = [softmax_list([A[i, j] for i in range(k)]) for j in range(k)]
    return np.array([[math.fsum(P1[ch, i] * cols[j][i] for i in range(k)) for j in range(k)] for ch in range(c)])


def correlate(P2, features):
    c, k = P2.shape
    flat = features.reshape(c, -1)
    hw = flat.shape[1]
    out = np.zeros((k, hw))
    for i in range(k):
        for p in range(hw):
            out[i, p] = math.fsum(P2[ch, i] * flat[ch, p] for ch in range(c)) / c
    return out.reshape((k,) + features.shape[1:])
