"""Dense feed-forward classifier engine.

Everything runs in float64 with manual, exact backpropagation over a fixed
MLP graph: affine layers, relu/tanh activations, optional inverted dropout
on the last hidden layer, softmax output. Besides the usual batch-mean
gradients it provides per-sample gradient norms (w.r.t. inputs and
parameters), which white-box membership attacks consume.

Forward/backward conventions:
    z_l = h_{l-1} @ W_l + b_l,  h_l = act(z_l)   (h_0 = inputs)
    logits = z_L (no activation), posteriors = softmax(logits)
    batch-mean cross-entropy gradient at logits: (P - T) / B
"""

import copy
import json

import numpy as np

from .errors import DimensionError, NumericError, StaleCacheError

CHECKPOINT_FORMAT_VERSION = 1

# Clamp applied to probabilities before any logarithm.
PROB_FLOOR = 1e-12

ACTIVATIONS = ("relu", "tanh")


class MlpModel:
    """Parameters of a dense softmax classifier.

    weights[l] has shape (layer_dims[l], layer_dims[l+1]); biases[l] has
    shape (layer_dims[l+1],). Dropout, when enabled, masks the output of
    the last hidden layer only.
    """

    def __init__(self, layer_dims, weights, biases, activation="relu", dropout_rate=0.0):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2:
            raise DimensionError("need at least input and output dims")
        if layer_dims[-1] < 2:
            raise DimensionError("output layer needs >= 2 classes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if len(weights) != len(layer_dims) - 1 or len(biases) != len(weights):
            raise DimensionError("one weight/bias pair per layer expected")
        for l, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (layer_dims[l], layer_dims[l + 1]):
                raise DimensionError(
                    f"layer {l}: weight shape {w.shape} vs dims "
                    f"({layer_dims[l]}, {layer_dims[l + 1]})"
                )
            if b.shape != (layer_dims[l + 1],):
                raise DimensionError(f"layer {l}: bias shape {b.shape}")
        self.layer_dims = layer_dims
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation
        self.dropout_rate = float(dropout_rate)

    @property
    def num_layers(self):
        return len(self.weights)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def num_classes(self):
        return self.layer_dims[-1]

    def clone(self):
        return copy.deepcopy(self)

    def num_parameters(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_model(layer_dims, activation="relu", dropout_rate=0.0, seed=0):
    """Fresh model with fan-in scaled-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_dims, weights, biases, activation, dropout_rate)


class ForwardCache:
    """Activations retained by forward() for the matching backward()."""

    def __init__(self, model, inputs, pre_acts, hidden, dropout_mask):
        self.model = model
        self.inputs = inputs
        self.pre_acts = pre_acts      # z_l for hidden layers, then logits
        self.hidden = hidden          # post-activation (and post-dropout) h_l
        self.dropout_mask = dropout_mask
        self.batch_size = inputs.shape[0]


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, kind):
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def softmax(logits):
    """Row-wise softmax, stable under large logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(model, inputs, train_mode=False, rng_seed=0):
    """Run the network on a batch.

    Returns (logits, posteriors, cache). Eval mode (train_mode=False) is
    deterministic and dropout-free; train mode applies inverted dropout to
    the last hidden layer, seeded by rng_seed, so eval needs no rescaling.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise DimensionError(
            f"inputs shape {inputs.shape} incompatible with input dim {model.input_dim}"
        )
    h = inputs
    pre_acts, hidden = [], []
    dropout_mask = None
    last_hidden = model.num_layers - 2  # index of the last hidden layer, -1 if none
    for l in range(model.num_layers - 1):
        z = h @ model.weights[l] + model.biases[l]
        h = _activate(z, model.activation)
        if train_mode and model.dropout_rate > 0.0 and l == last_hidden:
            rng = np.random.default_rng(rng_seed)
            keep = 1.0 - model.dropout_rate
            dropout_mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
            h = h * dropout_mask
        pre_acts.append(z)
        hidden.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    pre_acts.append(logits)
    posteriors = softmax(logits)
    return logits, posteriors, ForwardCache(model, inputs, pre_acts, hidden, dropout_mask)


def per_sample_cross_entropy(posteriors, targets):
    """-sum_c t^c log p^c for each row, with the probability floor applied."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if posteriors.shape != targets.shape:
        raise DimensionError(
            f"posteriors {posteriors.shape} vs targets {targets.shape}"
        )
    logs = np.log(np.maximum(posteriors, PROB_FLOOR))
    return -(targets * logs).sum(axis=1)


def cross_entropy(posteriors, targets):
    """Batch-mean cross-entropy; targets may be one-hot or soft rows."""
    return float(per_sample_cross_entropy(posteriors, targets).mean())


class Gradients:
    """Per-layer weight and bias gradients, shapes mirroring the model."""

    def __init__(self, weight_grads, bias_grads):
        self.weight_grads = weight_grads
        self.bias_grads = bias_grads

    def all_finite(self):
        return all(np.isfinite(g).all() for g in self.weight_grads) and all(
            np.isfinite(g).all() for g in self.bias_grads
        )


def backward_from_logit_grad(model, cache, dlogits):
    """Backpropagate an arbitrary gradient at the logits through the network."""
    if cache.model is not model:
        raise StaleCacheError("cache was produced by a different model instance")
    if dlogits.shape != (cache.batch_size, model.num_classes):
        raise DimensionError(f"dlogits shape {dlogits.shape} does not match cache")
    weight_grads = [None] * model.num_layers
    bias_grads = [None] * model.num_layers
    delta = dlogits
    last_hidden = model.num_layers - 2
    for l in range(model.num_layers - 1, -1, -1):
        h_prev = cache.inputs if l == 0 else cache.hidden[l - 1]
        weight_grads[l] = h_prev.T @ delta
        bias_grads[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ model.weights[l].T
            if cache.dropout_mask is not None and l - 1 == last_hidden:
                delta = delta * cache.dropout_mask
            delta = delta * _activate_grad(cache.pre_acts[l - 1], model.activation)
    return Gradients(weight_grads, bias_grads)


def backward(model, cache, posteriors, targets):
    """Exact gradient of the batch-mean cross-entropy w.r.t. all parameters.

    Targets are constants (one-hot or soft rows); no gradient flows into them.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if posteriors.shape != targets.shape:
        raise DimensionError(
            f"posteriors {posteriors.shape} vs targets {targets.shape}"
        )
    if posteriors.shape[0] != cache.batch_size:
        raise StaleCacheError("posteriors batch does not match cache batch")
    dlogits = (posteriors - targets) / cache.batch_size
    return backward_from_logit_grad(model, cache, dlogits)


class OptimizerState:
    """SGD with momentum and weight decay, plus an epoch-indexed lr schedule.

    lr_schedule is a list of (epoch, multiplier) pairs; the multiplier takes
    effect from that epoch on (cumulatively), mirroring step-decay schedules.
    """

    def __init__(self, model, learning_rate, momentum=0.0, weight_decay=0.0,
                 lr_schedule=()):
        if learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        for _, mult in lr_schedule:
            if mult <= 0.0:
                raise ValueError("schedule multipliers must be positive")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.lr_schedule = [(int(e), float(m)) for e, m in lr_schedule]
        self.lr_scale = 1.0
        self.velocity_w = [np.zeros_like(w) for w in model.weights]
        self.velocity_b = [np.zeros_like(b) for b in model.biases]

    def lr_at(self, epoch):
        """Effective learning rate at a 1-based epoch index."""
        scale = 1.0
        for start, mult in self.lr_schedule:
            if epoch >= start:
                scale *= mult
        return self.learning_rate * scale

    def apply_schedule(self, epoch):
        self.lr_scale = self.lr_at(epoch) / self.learning_rate

    @property
    def effective_lr(self):
        return self.learning_rate * self.lr_scale


def sgd_step(model, opt, grads, direction="descent"):
    """One parameter update, in place; returns the model.

    Descent runs momentum + weight decay (velocity update, then parameter
    update). Ascent is the plain update theta += lr * grad, bypassing both:
    pushing an ascent through the momentum buffer would poison the next
    descent steps.
    """
    if direction not in ("descent", "ascent"):
        raise ValueError(f"unknown direction {direction!r}")
    if len(grads.weight_grads) != model.num_layers:
        raise DimensionError("gradient layer count does not match model")
    if not grads.all_finite():
        raise NumericError("non-finite gradient entry; aborting update")
    lr = opt.effective_lr
    for l in range(model.num_layers):
        gw, gb = grads.weight_grads[l], grads.bias_grads[l]
        if gw.shape != model.weights[l].shape or gb.shape != model.biases[l].shape:
            raise DimensionError(f"layer {l}: gradient shape mismatch")
        if direction == "ascent":
            model.weights[l] += lr * gw
            model.biases[l] += lr * gb
        else:
            gw = gw + opt.weight_decay * model.weights[l]
            gb = gb + opt.weight_decay * model.biases[l]
            opt.velocity_w[l] = opt.momentum * opt.velocity_w[l] + gw
            opt.velocity_b[l] = opt.momentum * opt.velocity_b[l] + gb
            model.weights[l] -= lr * opt.velocity_w[l]
            model.biases[l] -= lr * opt.velocity_b[l]
    return model


def per_sample_grad_norms(model, inputs, targets_onehot):
    """Gradient norms of each sample's own cross-entropy, eval mode.

    Returns four arrays of length B: (grad_x_l1, grad_x_l2, grad_w_l1,
    grad_w_l2). Parameter norms cover the concatenation of all weight and
    bias gradients. Per-sample weight gradients are rank-one
    (outer(h_{l-1}, delta_l)), so their l1/Frobenius norms factor into
    vector norms and nothing larger than B x width is materialized.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    _, posteriors, cache = forward(model, inputs, train_mode=False)
    targets_onehot = np.asarray(targets_onehot, dtype=np.float64)
    if targets_onehot.shape != posteriors.shape:
        raise DimensionError("targets shape does not match posteriors")
    delta = posteriors - targets_onehot  # per-sample loss gradient at logits
    b = inputs.shape[0]
    w_l1 = np.zeros(b)
    w_l2_sq = np.zeros(b)
    for l in range(model.num_layers - 1, -1, -1):
        h_prev = cache.inputs if l == 0 else cache.hidden[l - 1]
        d_l1 = np.abs(delta).sum(axis=1)
        d_l2_sq = (delta * delta).sum(axis=1)
        h_l1 = np.abs(h_prev).sum(axis=1)
        h_l2_sq = (h_prev * h_prev).sum(axis=1)
        w_l1 += h_l1 * d_l1 + d_l1                 # weights + biases
        w_l2_sq += h_l2_sq * d_l2_sq + d_l2_sq
        if l > 0:
            delta = delta @ model.weights[l].T
            delta = delta * _activate_grad(cache.pre_acts[l - 1], model.activation)
    grad_x = delta @ model.weights[0].T  # delta now sits at the first pre-activation
    x_l1 = np.abs(grad_x).sum(axis=1)
    x_l2 = np.sqrt((grad_x * grad_x).sum(axis=1))
    return x_l1, x_l2, w_l1, np.sqrt(w_l2_sq)


def save_checkpoint(model, path):
    """Write a versioned JSON checkpoint; float64-lossless via repr floats."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": model.layer_dims,
        "activation": model.activation,
        "dropout_rate": model.dropout_rate,
        "weights": [w.reshape(-1).tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    dims = doc["layer_dims"]
    weights = [
        np.asarray(flat, dtype=np.float64).reshape(dims[l], dims[l + 1])
        for l, flat in enumerate(doc["weights"])
    ]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return MlpModel(dims, weights, biases, doc["activation"], doc["dropout_rate"])
