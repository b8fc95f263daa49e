"""Membership-inference attacks and their shadow-model calibration.

Scores are oriented so that higher = more member-like: negated loss,
negated entropy, negated modified entropy, negated gradient norms, or the
member-class posterior of a trained attack network. Threshold attacks are
calibrated by exhaustively sweeping candidate thresholds on shadow-model
scores; the attack network trains on shadow-model output features.

The adaptive protocol retrains the shadow model with the defender's own
configuration before calibrating, modelling an attacker who knows the
defense and its hyperparameters.
"""

import warnings

import numpy as np

from . import nn
from .analysis import compute_auc
from .data import Dataset, one_hot
from .errors import ConfigError, DimensionError
from .relaxloss import RelaxConfig, child_seed, entropy, train

THRESHOLD_ATTACKS = (
    "loss", "entropy", "m_entropy",
    "grad_x_l1", "grad_x_l2", "grad_w_l1", "grad_w_l2",
)
ALL_ATTACKS = ("loss", "entropy", "m_entropy", "nn",
               "grad_x_l1", "grad_x_l2", "grad_w_l1", "grad_w_l2")
BLACK_BOX_ATTACKS = ("loss", "entropy", "m_entropy", "nn")
WHITE_BOX_ATTACKS = ("grad_x_l1", "grad_x_l2", "grad_w_l1", "grad_w_l2")

NN_FEATURE_KINDS = ("posteriors", "logits")


class MembershipScoreSet:
    """Per-sample membership scores with ground-truth membership bits."""

    def __init__(self, scores, truths, attack_name="", class_labels=None):
        scores = np.asarray(scores, dtype=np.float64)
        truths = np.asarray(truths, dtype=np.int64)
        if scores.shape != truths.shape or scores.ndim != 1:
            raise DimensionError("scores and truths must be equal-length vectors")
        self.scores = scores
        self.truths = truths
        self.attack_name = attack_name
        self.class_labels = None if class_labels is None else np.asarray(class_labels)

    def is_balanced(self):
        return int((self.truths == 1).sum()) == int((self.truths == 0).sum())


class ThresholdRule:
    """Calibrated decision rule: predict member iff score > threshold."""

    def __init__(self, threshold, attack_name="", shadow_accuracy=0.5,
                 degenerate=False):
        if not np.isfinite(threshold):
            raise ValueError("threshold must be finite")
        self.threshold = float(threshold)
        self.attack_name = attack_name
        self.shadow_accuracy = float(shadow_accuracy)
        self.degenerate = bool(degenerate)


def _posteriors(model, features):
    _, posteriors, _ = nn.forward(model, features, train_mode=False)
    return posteriors


def score_loss(model, features, labels):
    """Negated per-sample cross-entropy; members tend toward 0 (the max)."""
    p = _posteriors(model, features)
    return -nn.per_sample_cross_entropy(p, one_hot(labels, model.num_classes))


def score_entropy(model, features, labels=None):
    """Negated prediction entropy; label-independent."""
    del labels
    return -entropy(_posteriors(model, features))


def score_m_entropy(model, features, labels):
    """Negated modified entropy.

    Mentr = -(1 - p_gt) log p_gt - sum_{c != gt} p_c log(1 - p_c),
    which is zero for a confident correct prediction and explodes for a
    confident wrong one; log arguments share the global probability floor.
    """
    p = _posteriors(model, features)
    rows = np.arange(p.shape[0])
    labels = np.asarray(labels, dtype=np.int64)
    p_gt = p[rows, labels]
    log_p_gt = np.log(np.maximum(p_gt, nn.PROB_FLOOR))
    log_1mp = np.log(np.maximum(1.0 - p, nn.PROB_FLOOR))
    total = (p * log_1mp).sum(axis=1)
    total -= p_gt * log_1mp[rows, labels]  # drop the ground-truth term
    mentr = -(1.0 - p_gt) * log_p_gt - total
    return -mentr


GRAD_KINDS = ("x_l1", "x_l2", "w_l1", "w_l2")


def score_grad_norm(model, features, labels, kind):
    """Negated per-sample gradient norm (members have smaller gradients)."""
    if kind not in GRAD_KINDS:
        raise ConfigError(f"unknown gradient kind {kind!r}")
    norms = nn.per_sample_grad_norms(
        model, features, one_hot(labels, model.num_classes)
    )
    return -norms[GRAD_KINDS.index(kind)]


def compute_scores(model, features, labels, attack_name):
    """Dispatch for the threshold attacks (the NN attack scores separately)."""
    if attack_name == "loss":
        return score_loss(model, features, labels)
    if attack_name == "entropy":
        return score_entropy(model, features)
    if attack_name == "m_entropy":
        return score_m_entropy(model, features, labels)
    if attack_name.startswith("grad_"):
        return score_grad_norm(model, features, labels, attack_name[len("grad_"):])
    raise ConfigError(f"unknown attack {attack_name!r}")


def _balanced_accuracy(members, nonmembers, threshold):
    tpr = float((members > threshold).mean())
    tnr = float((nonmembers <= threshold).mean())
    return 0.5 * (tpr + tnr)


def select_threshold(member_scores, nonmember_scores, attack_name=""):
    """Best-balanced-accuracy threshold over midpoint candidates.

    Candidates are midpoints between adjacent distinct pooled scores plus
    sentinels below the minimum and above the maximum; ties in accuracy
    break toward the smallest threshold. If nothing beats chance the rule
    is flagged degenerate.
    """
    member_scores = np.asarray(member_scores, dtype=np.float64)
    nonmember_scores = np.asarray(nonmember_scores, dtype=np.float64)
    if member_scores.size == 0 or nonmember_scores.size == 0:
        raise ConfigError("both score lists must be non-empty")
    pooled = np.unique(np.concatenate([member_scores, nonmember_scores]))
    candidates = [pooled[0] - 1.0]
    candidates.extend((pooled[:-1] + pooled[1:]) / 2.0)
    candidates.append(pooled[-1] + 1.0)
    best_tau, best_acc = None, -1.0
    for tau in candidates:
        acc = _balanced_accuracy(member_scores, nonmember_scores, tau)
        if acc > best_acc:
            best_tau, best_acc = tau, acc
    degenerate = best_acc <= 0.5 + 1e-12
    return ThresholdRule(best_tau, attack_name, best_acc, degenerate)


def evaluate_attack(rule, score_set, allow_unbalanced=False):
    """Fraction of correct membership calls under predict-member-iff-score>tau.

    Requires a balanced query set (chance = 0.5) unless explicitly
    overridden, in which case the result is flagged via a warning since
    its chance baseline is no longer 0.5.
    """
    if not score_set.is_balanced():
        if not allow_unbalanced:
            raise ConfigError(
                "query set is unbalanced; pass allow_unbalanced=True to override"
            )
        warnings.warn(
            f"attack {score_set.attack_name or rule.attack_name!r} evaluated "
            "on an unbalanced query set; accuracy baseline is not 0.5",
            stacklevel=2,
        )
    preds = (score_set.scores > rule.threshold).astype(np.int64)
    return float((preds == score_set.truths).mean())


class NnAttackModel:
    """Binary attack network over sorted target-model output vectors."""

    def __init__(self, model, feature_kind="posteriors"):
        if feature_kind not in NN_FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {feature_kind!r}")
        self.model = model
        self.feature_kind = feature_kind


def attack_features(target_model, features, feature_kind="posteriors"):
    """Sorted-descending output vectors; sorting removes class identity."""
    logits, posteriors, _ = nn.forward(target_model, features, train_mode=False)
    raw = posteriors if feature_kind == "posteriors" else logits
    return np.sort(raw, axis=1)[:, ::-1]


def train_nn_attack(shadow_model, dataset, split, feature_kind="posteriors",
                    hidden_dims=(64, 64), epochs=40, batch_size=128, lr=0.05,
                    momentum=0.9, seed=0):
    """Train the attack network on shadow-model output features.

    Members come from the shadow-train fold; the non-member pool is the
    shadow-test and surrogate folds, subsampled (seeded) to the member
    count so training stays balanced. Deterministic given the seed.
    """
    member_idx = split.indices("shadow_train")
    pool_idx = np.concatenate(
        [split.indices("shadow_test"), split.indices("surrogate")]
    )
    if len(member_idx) == 0 or len(pool_idx) == 0:
        raise ConfigError("shadow folds yield a single-class attack training set")
    rng = np.random.default_rng(child_seed(seed, "nn_attack_balance"))
    if len(pool_idx) > len(member_idx):
        pool_idx = pool_idx[rng.choice(len(pool_idx), len(member_idx), replace=False)]
    mem_feats = attack_features(shadow_model, dataset.features[member_idx], feature_kind)
    non_feats = attack_features(shadow_model, dataset.features[pool_idx], feature_kind)
    feats = np.concatenate([mem_feats, non_feats])
    labels = np.concatenate([
        np.ones(len(mem_feats), dtype=np.int64),
        np.zeros(len(non_feats), dtype=np.int64),
    ])
    attack_ds = Dataset(feats, labels, name="nn-attack-features")
    dims = [feats.shape[1], *hidden_dims, 2]
    model = nn.init_model(dims, activation="relu",
                          seed=child_seed(seed, "nn_attack_init"))
    opt = nn.OptimizerState(model, learning_rate=lr, momentum=momentum)
    config = RelaxConfig(alpha=0.0, epochs=epochs, batch_size=batch_size)
    train(model, attack_ds, np.arange(len(feats)), np.zeros(0, dtype=np.int64),
          "vanilla", config, opt,
          batch_seed=child_seed(seed, "nn_attack_batch"))
    return NnAttackModel(model, feature_kind)


def nn_attack_scores(attack, target_model, features, labels=None):
    """Member-class posterior of the attack network; in [0, 1]."""
    del labels
    feats = attack_features(target_model, features, attack.feature_kind)
    _, posteriors, _ = nn.forward(attack.model, feats, train_mode=False)
    return posteriors[:, 1]


def balanced_query_set(split, seed):
    """Target train/test indices truncated to equal size (seeded subsample)."""
    members = split.indices("target_train")
    nonmembers = split.indices("target_test")
    size = min(len(members), len(nonmembers))
    rng = np.random.default_rng(child_seed(seed, "balance"))
    if len(members) > size:
        members = members[rng.choice(len(members), size, replace=False)]
    if len(nonmembers) > size:
        nonmembers = nonmembers[rng.choice(len(nonmembers), size, replace=False)]
    return members, nonmembers


class AttackResult:
    """One evaluated attack against one target model."""

    def __init__(self, attack_name, threshold, shadow_accuracy, target_accuracy,
                 target_auc, adaptive, per_class_auc_top10, degenerate=False):
        self.attack_name = attack_name
        self.threshold = threshold
        self.shadow_accuracy = shadow_accuracy
        self.target_accuracy = target_accuracy
        self.target_auc = target_auc
        self.adaptive = adaptive
        self.per_class_auc_top10 = per_class_auc_top10
        self.degenerate = degenerate


def per_class_auc_top10(score_set):
    """Ten highest per-class AUCs, ascending (worst-case class risk)."""
    if score_set.class_labels is None:
        return []
    aucs = []
    for cls in np.unique(score_set.class_labels):
        mask = score_set.class_labels == cls
        sub = MembershipScoreSet(score_set.scores[mask], score_set.truths[mask])
        if (sub.truths == 1).any() and (sub.truths == 0).any():
            aucs.append(compute_auc(sub))
    return sorted(aucs)[-10:]


def run_attack_suite(target_model, shadow_model, dataset, split, attack_list,
                     attack_seed=0, adaptive=False, nn_hyper=None):
    """Calibrate every requested attack on the shadow model, evaluate on the
    target's balanced query set. Returns a list of AttackResult."""
    for name in attack_list:
        if name not in ALL_ATTACKS:
            raise ConfigError(f"unknown attack {name!r}")
    members, nonmembers = balanced_query_set(split, attack_seed)
    query_idx = np.concatenate([members, nonmembers])
    query_truths = np.concatenate([
        np.ones(len(members), dtype=np.int64),
        np.zeros(len(nonmembers), dtype=np.int64),
    ])
    query_x = dataset.features[query_idx]
    query_y = dataset.labels[query_idx]
    shadow_mem_idx = split.indices("shadow_train")
    shadow_non_idx = split.indices("shadow_test")
    results = []
    for name in attack_list:
        if name == "nn":
            attack = train_nn_attack(
                shadow_model, dataset, split,
                seed=child_seed(attack_seed, "nn"),
                **(nn_hyper or {}),
            )
            scores = nn_attack_scores(attack, target_model, query_x)
            shadow_scores_m = nn_attack_scores(
                attack, shadow_model, dataset.features[shadow_mem_idx])
            shadow_scores_n = nn_attack_scores(
                attack, shadow_model, dataset.features[shadow_non_idx])
            # The attack net is a classifier, not a thresholded metric:
            # its decision rule is argmax, i.e. member posterior > 0.5.
            rule = ThresholdRule(0.5, name, _balanced_accuracy(
                shadow_scores_m, shadow_scores_n, 0.5))
        else:
            shadow_scores_m = compute_scores(
                shadow_model, dataset.features[shadow_mem_idx],
                dataset.labels[shadow_mem_idx], name)
            shadow_scores_n = compute_scores(
                shadow_model, dataset.features[shadow_non_idx],
                dataset.labels[shadow_non_idx], name)
            rule = select_threshold(shadow_scores_m, shadow_scores_n, name)
            scores = compute_scores(target_model, query_x, query_y, name)
        score_set = MembershipScoreSet(scores, query_truths, name, query_y)
        results.append(AttackResult(
            attack_name=name,
            threshold=rule.threshold,
            shadow_accuracy=rule.shadow_accuracy,
            target_accuracy=evaluate_attack(rule, score_set),
            target_auc=compute_auc(score_set),
            adaptive=adaptive,
            per_class_auc_top10=per_class_auc_top10(score_set),
            degenerate=rule.degenerate,
        ))
    return results


def train_shadow_model(dataset, split, layer_dims, activation, dropout_rate,
                       method, relax_config, opt_settings, method_param=0.0,
                       seed=0):
    """Train a shadow model on the shadow folds; defended or vanilla.

    opt_settings is the (learning_rate, momentum, weight_decay, lr_schedule)
    tuple shared with the target so the shadow mirrors its training setting.
    """
    model = nn.init_model(layer_dims, activation, dropout_rate,
                          seed=child_seed(seed, "shadow_init"))
    lr, momentum, weight_decay, schedule = opt_settings
    opt = nn.OptimizerState(model, lr, momentum, weight_decay, schedule)
    model, _, _ = train(
        model, dataset, split.indices("shadow_train"), split.indices("shadow_test"),
        method, relax_config, opt,
        batch_seed=child_seed(seed, "shadow_batch"),
        dropout_seed=child_seed(seed, "shadow_dropout"),
        method_param=method_param,
    )
    return model


def run_adaptive_attack(target_model, dataset, split, attack_list, layer_dims,
                        activation, dropout_rate, method, relax_config,
                        opt_settings, method_param=0.0, attack_seed=0):
    """Attacks calibrated on a shadow model trained with the defender's own
    configuration (same method, alpha, epochs, optimizer settings).

    Returns (results, highest_accuracy) where the maximum is the worst-case
    privacy risk across the attack list.
    """
    if min(split.fold_sizes()) == 0:
        raise ConfigError("adaptive attack needs all five folds populated")
    # Same shadow seed as non-adaptive calibration: on an undefended target
    # the two pipelines must coincide exactly, config being the only delta.
    shadow = train_shadow_model(
        dataset, split, layer_dims, activation, dropout_rate,
        method, relax_config, opt_settings, method_param=method_param,
        seed=child_seed(attack_seed, "shadow"),
    )
    results = run_attack_suite(
        target_model, shadow, dataset, split, attack_list,
        attack_seed=attack_seed, adaptive=True,
    )
    highest = max(r.target_accuracy for r in results)
    return results, highest
