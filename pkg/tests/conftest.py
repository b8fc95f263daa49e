"""Shared oracles and factories for the test suite.

The oracles here are deliberately independent of the code paths they
check: finite differences for gradients, an exhaustive threshold sweep
with trapezoidal integration for AUC, and brute-force candidate sweeps
for threshold selection.
"""

import numpy as np

from mialab import nn
from mialab.data import one_hot


def random_small_model(seed, max_layers=3, max_units=10, activations=("relu", "tanh")):
    """A random MLP of at most max_layers affine layers, relu pre-activations
    kept clear of the kink so finite differences stay valid."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(2, max_units + 1)) for _ in range(depth + 1)]
    dims[-1] = max(dims[-1], 2)
    activation = activations[int(rng.integers(0, len(activations)))]
    model = nn.init_model(dims, activation=activation, seed=int(rng.integers(0, 2**31)))
    batch = int(rng.integers(1, 6))
    x = rng.standard_normal((batch, dims[0]))
    y = one_hot(rng.integers(0, dims[-1], batch), dims[-1])
    return model, x, y


def relu_kink_margin(model, x):
    """Smallest |pre-activation| over relu layers; large means FD-safe."""
    if model.activation != "relu" or model.num_layers == 1:
        return np.inf
    _, _, cache = nn.forward(model, x)
    return min(float(np.abs(z).min()) for z in cache.pre_acts[:-1])


def safe_random_model(seed, **kwargs):
    """random_small_model, retried until relu pre-activations clear the kink."""
    while True:
        model, x, y = random_small_model(seed, **kwargs)
        if relu_kink_margin(model, x) > 1e-3:
            return model, x, y
        seed += 10_000


def finite_diff_param_grads(model, x, targets, h=1e-5, train_mode=False, rng_seed=0):
    """Central finite differences of the batch-mean CE w.r.t. every parameter."""

    def loss():
        _, p, _ = nn.forward(model, x, train_mode=train_mode, rng_seed=rng_seed)
        return nn.cross_entropy(p, targets)

    weight_grads, bias_grads = [], []
    for l in range(model.num_layers):
        gw = np.zeros_like(model.weights[l])
        for idx, _ in np.ndenumerate(model.weights[l]):
            orig = model.weights[l][idx]
            model.weights[l][idx] = orig + h
            up = loss()
            model.weights[l][idx] = orig - h
            down = loss()
            model.weights[l][idx] = orig
            gw[idx] = (up - down) / (2 * h)
        gb = np.zeros_like(model.biases[l])
        for j in range(model.biases[l].size):
            orig = model.biases[l][j]
            model.biases[l][j] = orig + h
            up = loss()
            model.biases[l][j] = orig - h
            down = loss()
            model.biases[l][j] = orig
            gb[j] = (up - down) / (2 * h)
        weight_grads.append(gw)
        bias_grads.append(gb)
    return weight_grads, bias_grads


def max_rel_error(analytic, numeric):
    """Relative error with a unit floor so near-zero gradients compare absolutely."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def sweep_auc_oracle(scores, truths):
    """Exhaustive threshold-sweep trapezoidal AUC.

    Walks thresholds down through every distinct score, accumulating ROC
    area in integer/half-integer count space, then divides once by
    n_pos * n_neg, so it agrees bit for bit with a rank-based AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    n_pos = int((truths == 1).sum())
    n_neg = int((truths == 0).sum())
    area = 0.0
    tp = fp = 0.0
    for value in sorted(set(scores.tolist()), reverse=True):
        at = scores == value
        tp_new = tp + float((truths[at] == 1).sum())
        fp_new = fp + float((truths[at] == 0).sum())
        area += (fp_new - fp) * (tp + tp_new) / 2.0
        tp, fp = tp_new, fp_new
    return area / (n_pos * n_neg)


def balanced_accuracy(members, nonmembers, tau):
    tpr = float((np.asarray(members) > tau).mean())
    tnr = float((np.asarray(nonmembers) <= tau).mean())
    return 0.5 * (tpr + tnr)
