"""Relaxed-loss training and the regularizer baselines.

The trainer kernel is a per-batch three-way branch against a target mean
loss alpha: while the hard-label batch loss sits at or above alpha the
step is ordinary gradient descent; below alpha, even-numbered epochs take
a plain gradient-ascent step and odd-numbered epochs descend on a
flattened soft target built from the batch's own posteriors. alpha = 0
degrades exactly to vanilla training because cross-entropy is
non-negative.

Also here: label-smoothing and confidence-penalty losses, kept as
comparison baselines trained with plain descent.
"""

import zlib

import numpy as np

from . import nn
from .data import batch_iter, one_hot
from .errors import ConfigError, DimensionError, NumericError

FLATTEN_SCOPES = ("all_samples", "incorrect_only")
METHODS = ("vanilla", "relaxloss", "label_smoothing", "confidence_penalty")

TRACE_COLUMNS = (
    "epoch", "branch_desc", "branch_asc", "branch_flat",
    "train_loss_mean", "train_loss_var", "test_loss_mean",
    "train_acc1", "test_acc1", "train_acc5", "test_acc5", "lr",
)


def child_seed(base, *parts):
    """Stable derived seed: crc32 of the part path, mixed with the base."""
    tag = zlib.crc32(".".join(str(p) for p in parts).encode())
    return (int(base) * 2654435761 + tag) % (2 ** 63)


class RelaxConfig:
    """Hyperparameters of the relaxed-loss procedure."""

    def __init__(self, alpha=0.0, flatten_scope="all_samples", gt_cap=None,
                 epochs=1, batch_size=32):
        if alpha < 0.0:
            raise ConfigError("alpha must be >= 0")
        if flatten_scope not in FLATTEN_SCOPES:
            raise ConfigError(f"unknown flatten_scope {flatten_scope!r}")
        if gt_cap is not None and not 0.0 < gt_cap <= 1.0:
            raise ConfigError("gt_cap must lie in (0, 1]")
        if epochs < 1 or batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        self.alpha = float(alpha)
        self.flatten_scope = flatten_scope
        self.gt_cap = None if gt_cap is None else float(gt_cap)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)


class EpochPhaseDecision:
    """Which branch a batch takes, given its mean loss and the epoch index."""

    def __init__(self, branch, batch_mean_loss, epoch_index):
        self.branch = branch
        self.batch_mean_loss = batch_mean_loss
        self.epoch_index = epoch_index

    @classmethod
    def decide(cls, batch_mean_loss, alpha, epoch_index):
        if epoch_index < 1:
            raise ConfigError("epoch_index is 1-based")
        if batch_mean_loss >= alpha:
            branch = "descent"
        elif epoch_index % 2 == 0:
            branch = "ascent"
        else:
            branch = "flatten"
        return cls(branch, batch_mean_loss, epoch_index)


def construct_softlabels(posteriors, labels_onehot, config):
    """Flattened target rows: keep (or cap) the ground-truth score, spread
    the remaining mass evenly over the other classes.

    The result is a constant target; no gradient is attributed to it.
    """
    posteriors = np.asarray(posteriors, dtype=np.float64)
    labels_onehot = np.asarray(labels_onehot, dtype=np.float64)
    if posteriors.shape != labels_onehot.shape:
        raise DimensionError("posteriors and labels shapes differ")
    c = posteriors.shape[1]
    if c < 2:
        raise ConfigError("softlabels need at least 2 classes")
    gt = labels_onehot.argmax(axis=1)
    rows = np.arange(posteriors.shape[0])
    t_gt = posteriors[rows, gt]
    if config.gt_cap is not None:
        t_gt = np.minimum(t_gt, config.gt_cap)
    targets = np.repeat(((1.0 - t_gt) / (c - 1))[:, None], c, axis=1)
    targets[rows, gt] = t_gt
    return targets


def flatten_targets(posteriors, labels_onehot, config):
    """Softlabels with the configured scope applied.

    Under incorrect_only, correctly-predicted rows keep their one-hot
    target inside the same batch loss, so the effective batch never
    shrinks.
    """
    targets = construct_softlabels(posteriors, labels_onehot, config)
    if config.flatten_scope == "incorrect_only":
        correct = posteriors.argmax(axis=1) == labels_onehot.argmax(axis=1)
        targets[correct] = labels_onehot[correct]
    return targets


class EpochRecord:
    """One trace row: branch counts plus loss/accuracy statistics."""

    def __init__(self, epoch, branch_desc, branch_asc, branch_flat,
                 train_loss_mean, train_loss_var, test_loss_mean,
                 train_acc1, test_acc1, train_acc5, test_acc5, lr,
                 forward_calls=0):
        self.epoch = epoch
        self.branch_desc = branch_desc
        self.branch_asc = branch_asc
        self.branch_flat = branch_flat
        self.train_loss_mean = train_loss_mean
        self.train_loss_var = train_loss_var
        self.test_loss_mean = test_loss_mean
        self.train_acc1 = train_acc1
        self.test_acc1 = test_acc1
        self.train_acc5 = train_acc5
        self.test_acc5 = test_acc5
        self.lr = lr
        self.forward_calls = forward_calls  # structural overhead check; not in CSV

    def as_row(self):
        return [getattr(self, col) for col in TRACE_COLUMNS]


class TrainTrace:
    """Per-epoch records for a whole training run."""

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    @property
    def final(self):
        if not self.records:
            raise ValueError("empty trace")
        return self.records[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for rec in self.records:
                fh.write(",".join(_cell(v) for v in rec.as_row()) + "\n")

    @classmethod
    def read_csv(cls, path):
        trace = cls()
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if tuple(header) != TRACE_COLUMNS:
                raise ConfigError(f"unexpected trace header in {path}")
            for line in fh:
                cells = line.strip().split(",")
                kwargs = dict(zip(TRACE_COLUMNS, cells))
                for key in TRACE_COLUMNS:
                    conv = int if key.startswith(("epoch", "branch")) else float
                    kwargs[key] = conv(kwargs[key])
                trace.append(EpochRecord(**kwargs))
        return trace


def _cell(value):
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def label_smoothing_loss(posteriors, labels_onehot, alpha_ls):
    """alpha * KL(uniform || p) + (1 - alpha) * cross-entropy, batch mean."""
    if not 0.0 <= alpha_ls <= 1.0:
        raise ConfigError("label smoothing alpha must be in [0, 1]")
    posteriors = np.asarray(posteriors, dtype=np.float64)
    c = posteriors.shape[1]
    logs = np.log(np.maximum(posteriors, nn.PROB_FLOOR))
    kl_uniform = -np.log(c) - logs.mean(axis=1)
    ce = nn.per_sample_cross_entropy(posteriors, labels_onehot)
    return float((alpha_ls * kl_uniform + (1.0 - alpha_ls) * ce).mean())


def _label_smoothing_dlogits(posteriors, labels_onehot, alpha_ls):
    # KL(U || p) differentiates at the logits exactly like cross-entropy
    # against a uniform target, so the blend is CE against a blended target.
    c = posteriors.shape[1]
    blended = alpha_ls / c + (1.0 - alpha_ls) * labels_onehot
    return (posteriors - blended) / posteriors.shape[0]


def entropy(posteriors):
    """Per-row Shannon entropy with the 0 * log 0 := 0 convention."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    logs = np.log(np.maximum(posteriors, nn.PROB_FLOOR))
    return -np.where(posteriors > 0.0, posteriors * logs, 0.0).sum(axis=1)


def confidence_penalty_loss(posteriors, labels_onehot, alpha_cp):
    """Cross-entropy minus alpha times the mean prediction entropy."""
    if alpha_cp < 0.0:
        raise ConfigError("confidence penalty alpha must be >= 0")
    ce = nn.per_sample_cross_entropy(posteriors, labels_onehot)
    return float((ce - alpha_cp * entropy(posteriors)).mean())


def _confidence_penalty_dlogits(posteriors, labels_onehot, alpha_cp):
    logs = np.log(np.maximum(posteriors, nn.PROB_FLOOR))
    h = entropy(posteriors)[:, None]
    # d(-H)/dlogits = p * (log p + H)
    penalty = posteriors * (logs + h)
    return (posteriors - labels_onehot + alpha_cp * penalty) / posteriors.shape[0]


def relaxloss_epoch(model, batches, config, opt, epoch_index, dropout_seed=0):
    """One epoch of the three-way-branch loop over prepared batches.

    batches is an iterable of (features, int labels). Every branch reuses
    the single forward pass that produced the branch decision; the flatten
    branch additionally reuses its posteriors as the softlabel source, so
    its extra work is O(batch * classes) scalar arithmetic only.

    Returns (branch_counts, forward_calls).
    """
    if epoch_index < 1:
        raise ConfigError("epoch_index is 1-based")
    counts = {"descent": 0, "ascent": 0, "flatten": 0}
    forward_calls = 0
    num_classes = model.num_classes
    for batch_index, (x, y) in enumerate(batches):
        y1h = one_hot(y, num_classes)
        seed = child_seed(dropout_seed, epoch_index, batch_index)
        _, posteriors, cache = nn.forward(model, x, train_mode=True, rng_seed=seed)
        forward_calls += 1
        batch_loss = nn.cross_entropy(posteriors, y1h)
        if not np.isfinite(batch_loss):
            raise NumericError(
                f"non-finite batch loss at epoch {epoch_index}, batch {batch_index}"
            )
        decision = EpochPhaseDecision.decide(batch_loss, config.alpha, epoch_index)
        counts[decision.branch] += 1
        if decision.branch == "flatten":
            targets = flatten_targets(posteriors, y1h, config)
            grads = nn.backward(model, cache, posteriors, targets)
            nn.sgd_step(model, opt, grads, direction="descent")
        else:
            grads = nn.backward(model, cache, posteriors, y1h)
            nn.sgd_step(model, opt, grads, direction=decision.branch)
    return counts, forward_calls


def evaluate(model, dataset, indices, batch_size=512):
    """Eval-mode per-sample CE losses and top-1/top-5 accuracy (percent)."""
    losses, top1, topk = [], 0, 0
    k = min(5, model.num_classes)
    total = 0
    for x, y in batch_iter(dataset, indices, batch_size):
        _, posteriors, _ = nn.forward(model, x, train_mode=False)
        y1h = one_hot(y, model.num_classes)
        losses.append(nn.per_sample_cross_entropy(posteriors, y1h))
        ranked = np.argsort(posteriors, axis=1)[:, ::-1]
        top1 += int((ranked[:, 0] == y).sum())
        topk += int((ranked[:, :k] == y[:, None]).any(axis=1).sum())
        total += len(y)
    if total == 0:
        return np.zeros(0), 0.0, 0.0
    return np.concatenate(losses), 100.0 * top1 / total, 100.0 * topk / total


def train(model, dataset, train_indices, test_indices, method, config, opt,
          checkpoint_epochs=(), batch_seed=0, dropout_seed=0,
          method_param=0.0):
    """Full training loop; deterministic given the model init and seeds.

    method selects the update rule: "vanilla" (= relaxloss with alpha 0),
    "relaxloss", or a regularizer baseline ("label_smoothing",
    "confidence_penalty") whose strength is method_param. Returns
    (model, TrainTrace, {epoch: model snapshot}).
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if len(train_indices) == 0:
        raise ConfigError("empty training split")
    bad = [e for e in checkpoint_epochs if not 1 <= e <= config.epochs]
    if bad:
        raise ConfigError(f"checkpoint epochs {bad} outside [1, {config.epochs}]")
    effective = config
    if method == "vanilla":
        effective = RelaxConfig(0.0, config.flatten_scope, config.gt_cap,
                                config.epochs, config.batch_size)
    snapshots = {}
    trace = TrainTrace()
    for epoch in range(1, config.epochs + 1):
        opt.apply_schedule(epoch)
        batches = batch_iter(dataset, train_indices, config.batch_size,
                             seed=child_seed(batch_seed, epoch), shuffle=True)
        try:
            if method in ("vanilla", "relaxloss"):
                counts, fwd = relaxloss_epoch(
                    model, batches, effective, opt, epoch, dropout_seed=dropout_seed
                )
            else:
                counts, fwd = _baseline_epoch(
                    model, batches, method, method_param, opt, epoch,
                    dropout_seed=dropout_seed,
                )
        except NumericError as err:
            err.trace = trace  # epochs completed so far survive the abort
            raise
        train_losses, train_acc1, train_acc5 = evaluate(model, dataset, train_indices)
        test_losses, test_acc1, test_acc5 = evaluate(model, dataset, test_indices)
        trace.append(EpochRecord(
            epoch=epoch,
            branch_desc=counts["descent"],
            branch_asc=counts["ascent"],
            branch_flat=counts["flatten"],
            train_loss_mean=float(train_losses.mean()),
            train_loss_var=float(train_losses.var()),
            test_loss_mean=float(test_losses.mean()) if len(test_losses) else 0.0,
            train_acc1=train_acc1,
            test_acc1=test_acc1,
            train_acc5=train_acc5,
            test_acc5=test_acc5,
            lr=opt.effective_lr,
            forward_calls=fwd,
        ))
        if epoch in checkpoint_epochs:
            snapshots[epoch] = model.clone()
    return model, trace, snapshots


def _baseline_epoch(model, batches, method, strength, opt, epoch_index,
                    dropout_seed=0):
    counts = {"descent": 0, "ascent": 0, "flatten": 0}
    forward_calls = 0
    for batch_index, (x, y) in enumerate(batches):
        y1h = one_hot(y, model.num_classes)
        seed = child_seed(dropout_seed, epoch_index, batch_index)
        _, posteriors, cache = nn.forward(model, x, train_mode=True, rng_seed=seed)
        forward_calls += 1
        if method == "label_smoothing":
            loss = label_smoothing_loss(posteriors, y1h, strength)
            dlogits = _label_smoothing_dlogits(posteriors, y1h, strength)
        else:
            loss = confidence_penalty_loss(posteriors, y1h, strength)
            dlogits = _confidence_penalty_dlogits(posteriors, y1h, strength)
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite batch loss at epoch {epoch_index}, batch {batch_index}"
            )
        grads = nn.backward_from_logit_grad(model, cache, dlogits)
        nn.sgd_step(model, opt, grads, direction="descent")
        counts["descent"] += 1
    return counts, forward_calls
