"""Experiment orchestration: seeded end-to-end runs and plain-file reports.

A run directory is fully described by its manifest.json; re-executing a
manifest reproduces every artifact byte for byte. Reports are CSV/JSON,
ready for external plotting. One RNG seed per concern (data, init, batch,
attack) so ablations can hold any one of them fixed.
"""

import json
import os

import numpy as np

from . import analysis, attacks, nn
from .data import SyntheticSpec, five_fold_split, generate_synthetic, load_csv
from .errors import ConfigError, MialabError
from .relaxloss import RelaxConfig, TrainTrace, child_seed, evaluate, train

MANIFEST_FORMAT_VERSION = 1

ATTACK_REPORT_COLUMNS = (
    "attack_name", "threshold", "shadow_accuracy", "target_accuracy",
    "target_auc", "adaptive_flag", "per_class_auc_top10",
)
SWEEP_COLUMNS = (
    "method", "value", "attack_name", "attack_auc", "attack_accuracy",
    "test_acc_top1", "test_acc_top5", "train_loss_mean", "train_loss_var",
    "generalization_gap",
)
SWEEP_PARAMS = ("alpha", "alpha_ls", "alpha_cp", "dropout_rate", "epochs")

# field name -> (parser tag, default); the manifest records every field.
CONFIG_FIELDS = {
    "dataset": ("str", "synthetic"),
    "data_mode": ("str", "gaussian_blobs"),
    "classes": ("int", 20),
    "dim": ("int", 50),
    "per_class": ("int", 500),
    "class_separation": ("float", 2.2),
    "noise_sigma": ("float", 1.0),
    "label_col": ("str", "label"),
    "feature_kind": ("str", "real_valued"),
    "hidden_dims": ("int_list", [256, 128]),
    "activation": ("str", "relu"),
    "dropout_rate": ("float", 0.0),
    "method": ("str", "vanilla"),
    "alpha": ("float", 0.0),
    "alpha_ls": ("float", 0.0),
    "alpha_cp": ("float", 0.0),
    "flatten_scope": ("str", "all_samples"),
    "gt_cap": ("float_or_none", None),
    "epochs": ("int", 60),
    "batch_size": ("int", 64),
    "checkpoint_epochs": ("int_list", []),
    "lr": ("float", 0.03),
    "momentum": ("float", 0.9),
    "weight_decay": ("float", 1e-4),
    "lr_schedule": ("schedule", [(45, 0.1)]),
    "attacks": ("str_list", list(attacks.ALL_ATTACKS)),
    "seed_data": ("int", 0),
    "seed_init": ("int", 1),
    "seed_batch": ("int", 2),
    "seed_attack": ("int", 3),
    "outdir": ("str", "runs/run"),
}


def _parse_value(tag, raw):
    raw = raw.strip()
    if tag == "str":
        return raw
    if tag == "int":
        return int(raw)
    if tag == "float":
        return float(raw)
    if tag == "float_or_none":
        return None if raw.lower() in ("", "none") else float(raw)
    if tag == "int_list":
        return [int(v) for v in raw.split(",") if v.strip()]
    if tag == "str_list":
        return [v.strip() for v in raw.split(",") if v.strip()]
    if tag == "schedule":
        pairs = []
        for part in raw.split(","):
            part = part.strip()
            if not part:
                continue
            epoch, _, mult = part.partition(":")
            pairs.append((int(epoch), float(mult)))
        return pairs
    raise ConfigError(f"unknown field tag {tag!r}")


class ExperimentConfig:
    """Fully resolved settings of one run; every field lands in the manifest."""

    def __init__(self, **overrides):
        values = {name: default for name, (_, default) in CONFIG_FIELDS.items()}
        for key, val in overrides.items():
            if key not in CONFIG_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
        for key, val in values.items():
            setattr(self, key, val)
        self._validate()

    def _validate(self):
        if self.method not in ("vanilla", "relaxloss", "label_smoothing",
                               "confidence_penalty"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for name in self.attacks:
            if name not in attacks.ALL_ATTACKS:
                raise ConfigError(f"unknown attack {name!r}")
        # delegate the rest to the constructors that own each invariant
        self.relax_config()

    @classmethod
    def from_mapping(cls, mapping):
        parsed = {}
        for key, raw in mapping.items():
            if key not in CONFIG_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            tag = CONFIG_FIELDS[key][0]
            if isinstance(raw, str):
                parsed[key] = _parse_value(tag, raw)
            elif tag == "schedule" and raw is not None:
                parsed[key] = [(int(e), float(m)) for e, m in raw]
            else:
                parsed[key] = raw
        return cls(**parsed)

    @classmethod
    def from_file(cls, path, overrides=None):
        """Read key = value text, or a manifest/config JSON document."""
        with open(path) as fh:
            text = fh.read()
        stripped = text.lstrip()
        if stripped.startswith("{"):
            doc = json.loads(text)
            mapping = doc.get("config", doc)
        else:
            mapping = {}
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                mapping[key.strip()] = raw.strip()
        if overrides:
            mapping.update(overrides)
        return cls.from_mapping(mapping)

    def as_dict(self):
        out = {}
        for key in CONFIG_FIELDS:
            val = getattr(self, key)
            if CONFIG_FIELDS[key][0] == "schedule":
                val = [[int(e), float(m)] for e, m in val]
            out[key] = val
        return out

    def replace(self, **changes):
        merged = self.as_dict()
        merged.update(changes)
        return ExperimentConfig.from_mapping(merged)

    def relax_config(self):
        return RelaxConfig(
            alpha=self.alpha if self.method == "relaxloss" else 0.0,
            flatten_scope=self.flatten_scope,
            gt_cap=self.gt_cap,
            epochs=self.epochs,
            batch_size=self.batch_size,
        )

    def method_param(self):
        if self.method == "label_smoothing":
            return self.alpha_ls
        if self.method == "confidence_penalty":
            return self.alpha_cp
        return 0.0

    def opt_settings(self):
        return (self.lr, self.momentum, self.weight_decay, self.lr_schedule)

    def build_dataset(self):
        if self.dataset == "synthetic":
            spec = SyntheticSpec(
                classes=self.classes, dim=self.dim, per_class=self.per_class,
                class_separation=self.class_separation,
                noise_sigma=self.noise_sigma, mode=self.data_mode,
                seed=self.seed_data,
            )
            return generate_synthetic(spec)
        return load_csv(self.dataset, self.label_col, self.feature_kind)

    def build_split(self, dataset):
        return five_fold_split(dataset, child_seed(self.seed_data, "split"))

    def layer_dims(self, dataset):
        return [dataset.dim, *self.hidden_dims, dataset.num_classes]


def _write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _fmt(value):
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def cmd_train(config, outdir=None):
    """Train per config and persist manifest, trace, and checkpoints.

    Returns the run directory path.
    """
    outdir = outdir or config.outdir
    os.makedirs(outdir, exist_ok=True)
    dataset = config.build_dataset()
    split = config.build_split(dataset)
    model = nn.init_model(config.layer_dims(dataset), config.activation,
                          config.dropout_rate, seed=config.seed_init)
    opt = nn.OptimizerState(model, *config.opt_settings())
    model, trace, snapshots = train(
        model, dataset, split.indices("target_train"), split.indices("target_test"),
        config.method, config.relax_config(), opt,
        checkpoint_epochs=config.checkpoint_epochs,
        batch_seed=config.seed_batch,
        dropout_seed=child_seed(config.seed_batch, "dropout"),
        method_param=config.method_param(),
    )
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "config": config.as_dict(),
        "init_scheme": "fan_in_scaled_uniform",
        "variance_convention": "population",
    }
    _write_json(manifest, os.path.join(outdir, "manifest.json"))
    trace.write_csv(os.path.join(outdir, "trace.csv"))
    nn.save_checkpoint(model, os.path.join(outdir, "checkpoint.json"))
    for epoch, snap in sorted(snapshots.items()):
        nn.save_checkpoint(snap, os.path.join(outdir, f"checkpoint_epoch{epoch}.json"))
    return outdir


def load_run(run_dir):
    """(config, dataset, split, model, trace) for an existing run directory."""
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"no manifest.json under {run_dir}")
    config = ExperimentConfig.from_file(manifest_path)
    dataset = config.build_dataset()
    split = config.build_split(dataset)
    checkpoint = os.path.join(run_dir, "checkpoint.json")
    if not os.path.exists(checkpoint):
        raise ConfigError(f"no checkpoint.json under {run_dir}")
    model = nn.load_checkpoint(checkpoint)
    trace = TrainTrace.read_csv(os.path.join(run_dir, "trace.csv"))
    return config, dataset, split, model, trace


def cmd_attack(run_dir, attack_list=None, adaptive=False):
    """Calibrate and evaluate attacks against a finished run.

    Non-adaptive calibration trains an undefended (vanilla) shadow model;
    adaptive reuses the defender's own configuration. Writes
    attack_report.csv (or attack_report_adaptive.csv) and returns the rows.
    """
    config, dataset, split, model, _ = load_run(run_dir)
    attack_list = list(attack_list or config.attacks)
    if adaptive:
        method, relax_cfg = config.method, config.relax_config()
        method_param = config.method_param()
    else:
        method, method_param = "vanilla", 0.0
        relax_cfg = RelaxConfig(0.0, epochs=config.epochs,
                                batch_size=config.batch_size)
    shadow = attacks.train_shadow_model(
        dataset, split, config.layer_dims(dataset), config.activation,
        config.dropout_rate, method, relax_cfg, config.opt_settings(),
        method_param=method_param,
        seed=child_seed(config.seed_attack, "shadow"),
    )
    results = attacks.run_attack_suite(
        model, shadow, dataset, split, attack_list,
        attack_seed=config.seed_attack, adaptive=adaptive,
    )
    rows = [
        [
            r.attack_name, r.threshold, r.shadow_accuracy, r.target_accuracy,
            r.target_auc, int(r.adaptive),
            ";".join(f"{v:.6f}" for v in r.per_class_auc_top10),
        ]
        for r in results
    ]
    name = "attack_report_adaptive.csv" if adaptive else "attack_report.csv"
    _write_csv(os.path.join(run_dir, name), ATTACK_REPORT_COLUMNS, rows)
    return results


def read_attack_report(run_dir, adaptive=False):
    """Rows of a previously written attack report, keyed by attack name."""
    name = "attack_report_adaptive.csv" if adaptive else "attack_report.csv"
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        return None
    out = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != ATTACK_REPORT_COLUMNS:
            raise ConfigError(f"unexpected attack report header in {path}")
        for line in fh:
            cells = line.rstrip("\n").split(",")
            out[cells[0]] = {
                "threshold": float(cells[1]),
                "shadow_accuracy": float(cells[2]),
                "accuracy": float(cells[3]),
                "auc": float(cells[4]),
                "adaptive": bool(int(cells[5])),
                "per_class_auc_top10": [float(v) for v in cells[6].split(";") if v],
            }
    return out


def _method_for_param(param, base_method):
    if param == "alpha":
        return "relaxloss"
    if param == "alpha_ls":
        return "label_smoothing"
    if param == "alpha_cp":
        return "confidence_penalty"
    if param in ("dropout_rate", "epochs"):
        return base_method
    raise ConfigError(f"unknown sweep parameter {param!r}")


def cmd_sweep(config, param, values, attack_list=None):
    """Independent seeded runs across hyperparameter values.

    One sub-run per value under <outdir>/sweep_<param>_<value>; each is
    trained and attacked, and a combined sweep.csv is written, sorted by
    value then attack name. Failed runs become explicit error rows and the
    returned ok flag turns False.
    """
    if not values:
        raise ConfigError("empty sweep value list")
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}")
    os.makedirs(config.outdir, exist_ok=True)
    attack_list = list(attack_list or config.attacks)
    method = _method_for_param(param, config.method)
    rows, ok = [], True
    for value in values:
        tag = f"sweep_{param}_{_fmt(value)}"
        sub_dir = os.path.join(config.outdir, tag)
        caster = int if param == "epochs" else float
        try:
            sub_cfg = config.replace(method=method, outdir=sub_dir,
                                     **{param: caster(value)})
            run_dir = cmd_train(sub_cfg)
            results = cmd_attack(run_dir, attack_list)
            trace = TrainTrace.read_csv(os.path.join(run_dir, "trace.csv"))
            final = trace.final
            gap = analysis.generalization_gap(trace)
            for r in results:
                rows.append([
                    method, value, r.attack_name, r.target_auc, r.target_accuracy,
                    final.test_acc1, final.test_acc5,
                    final.train_loss_mean, final.train_loss_var, gap,
                ])
        except MialabError as err:
            ok = False
            for name in attack_list:
                rows.append([method, value, name, f"error:{err}", "", "", "", "", "", ""])
    rows.sort(key=lambda row: (row[1], row[2]))
    _write_csv(os.path.join(config.outdir, "sweep.csv"), SWEEP_COLUMNS, rows)
    return rows, ok


def select_alpha(sweep_rows, baseline_acc, utility_slack=0.0):
    """Post-hoc pick: lowest mean attack AUC whose test accuracy is not
    worse than the baseline (within the given slack, percentage points)."""
    by_value = {}
    for row in sweep_rows:
        if isinstance(row[3], str):
            continue
        by_value.setdefault(row[1], []).append(row)
    best_value, best_auc = None, None
    for value, group in sorted(by_value.items()):
        mean_auc = float(np.mean([r[3] for r in group]))
        test_acc = group[0][5]
        if test_acc + utility_slack < baseline_acc:
            continue
        if best_auc is None or mean_auc < best_auc:
            best_value, best_auc = value, mean_auc
    return best_value


def cmd_analyze(run_dirs, histogram_bins=30, correlation=None):
    """Loss statistics, Gaussian bound chain, and cross-run correlation.

    correlation=None decides automatically (on iff >= 2 runs). The report
    maps each run directory to its stats and, when enabled, adds the
    Pearson correlation between final train-loss variance and mean attack
    AUC for black-box / white-box / all attack groups.
    """
    if correlation is None:
        correlation = len(run_dirs) >= 2
    if correlation and len(run_dirs) < 2:
        raise ConfigError("correlation requires at least 2 runs")
    report = {"runs": {}, "variance_convention": "population"}
    variances, auc_groups = [], {"black_box": [], "white_box": [], "all": []}
    for run_dir in run_dirs:
        config, dataset, split, model, trace = load_run(run_dir)
        train_losses, _, _ = evaluate(model, dataset, split.indices("target_train"))
        test_losses, _, _ = evaluate(model, dataset, split.indices("target_test"))
        train_stats = analysis.loss_stats(train_losses)
        test_stats = analysis.loss_stats(test_losses)
        entry = {
            "loss_stats": {"train": train_stats.as_dict(), "test": test_stats.as_dict()},
            "generalization_gap": analysis.generalization_gap(trace),
            "histograms": {},
            "attacks": {},
        }
        hi = float(max(train_losses.max(), test_losses.max(), 1e-6))
        for tag, losses in (("train", train_losses), ("test", test_losses)):
            entry["histograms"][tag] = analysis.loss_histogram(
                losses, histogram_bins, (0.0, hi)).as_dict()
        try:
            train_fit = analysis.fit_gaussian(train_losses)
            test_fit = analysis.fit_gaussian(test_losses)
            entry["gaussian_fit"] = {
                "train": train_fit.as_dict(), "test": test_fit.as_dict(),
            }
            entry["bound_report"] = analysis.BoundReport(train_fit, test_fit).as_dict()
        except MialabError as err:
            entry["bound_report"] = {"error": str(err)}
        attack_rows = read_attack_report(run_dir)
        if attack_rows is None:
            attack_rows = _metric_attack_aucs(model, dataset, split, config)
        entry["attacks"] = {
            name: {"auc": info["auc"], "accuracy": info.get("accuracy")}
            for name, info in attack_rows.items()
        }
        report["runs"][run_dir] = entry
        variances.append(train_stats.variance)
        for group, names in (("black_box", attacks.BLACK_BOX_ATTACKS),
                             ("white_box", attacks.WHITE_BOX_ATTACKS),
                             ("all", attacks.ALL_ATTACKS)):
            aucs = [attack_rows[n]["auc"] for n in names if n in attack_rows]
            auc_groups[group].append(float(np.mean(aucs)) if aucs else None)
    if correlation:
        corr = {}
        for group, values in auc_groups.items():
            if any(v is None for v in values):
                corr[group] = None
                continue
            try:
                corr[group] = analysis.pearson_correlation(variances, values)
            except MialabError:
                corr[group] = None
        report["pearson_var_auc"] = corr
    return report


def _metric_attack_aucs(model, dataset, split, config):
    """Shadow-free fallback: AUCs of the three metric attacks only."""
    members, nonmembers = attacks.balanced_query_set(split, config.seed_attack)
    idx = np.concatenate([members, nonmembers])
    truths = np.concatenate([np.ones(len(members)), np.zeros(len(nonmembers))])
    out = {}
    for name in ("loss", "entropy", "m_entropy"):
        scores = attacks.compute_scores(
            model, dataset.features[idx], dataset.labels[idx], name)
        score_set = attacks.MembershipScoreSet(scores, truths, name)
        out[name] = {"auc": analysis.compute_auc(score_set)}
    return out


def write_analysis(report, path):
    _write_json(report, path)


def cmd_boundary(run_dir, xmin, xmax, ymin, ymax, steps):
    """Posterior scores over a regular 2-D grid, for decision-boundary plots.

    Only defined for models with a 2-dimensional input.
    """
    _, _, _, model, _ = load_run(run_dir)
    if model.input_dim != 2:
        raise ConfigError(f"boundary dump needs input dim 2, model has {model.input_dim}")
    if steps < 1 or not (xmin < xmax and ymin < ymax):
        raise ConfigError("invalid grid spec")
    xs = np.linspace(xmin, xmax, steps)
    ys = np.linspace(ymin, ymax, steps)
    grid = np.array([[x, y] for x in xs for y in ys])
    _, posteriors, _ = nn.forward(model, grid, train_mode=False)
    columns = ["x", "y"] + [f"score_{c}" for c in range(model.num_classes)] + ["argmax"]
    rows = [
        [grid[i, 0], grid[i, 1], *posteriors[i].tolist(), int(posteriors[i].argmax())]
        for i in range(len(grid))
    ]
    _write_csv(os.path.join(run_dir, "boundary.csv"), columns, rows)
    return rows
