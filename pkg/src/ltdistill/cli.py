"""Command-line surface: dataset generation, expert training, distillation,
evaluation, baselines, diagnostics, and report assembly.

Configuration is a flat UTF-8 file of `key = value` lines with `#` comments;
any key can be overridden on the command line as `--key=value`. Unknown keys
are rejected. Every artifact embeds the fingerprint (stable hash) of the
canonicalized configuration so reports can verify provenance. The
LT_DISTILL_OUT environment variable overrides the output directory.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys

import numpy as np

from . import datasets, distill, evalkit, experts, models
from .datasets import LongTailSpec, ToySpec, derive_seed
from .distill import DistillConfig
from .experts import MaxNormConfig, TrainConfig

COMMANDS = ("gen-data", "train-experts", "distill", "eval", "baseline", "diag", "report")


class ConfigError(ValueError):
    """Invalid configuration: unknown key, type error, or constraint breach."""


def _typed(kind, lo=None, choices=None):
    """Build a (parser, constraint text) pair for one config key."""
    def parse(raw: str):
        raw = raw.strip()
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        if kind is tuple:  # comma-separated positive ints
            vals = tuple(int(v) for v in raw.split(",") if v.strip())
            if not vals or any(v < 1 for v in vals):
                raise ValueError("expected comma-separated positive ints")
            return vals
        value = kind(raw)
        if lo is not None and value < lo:
            raise ValueError(f"must be >= {lo}")
        if choices is not None and value not in choices:
            raise ValueError(f"must be one of {', '.join(choices)}")
        return value

    if kind is bool:
        text = "bool (true/false)"
    elif kind is tuple:
        text = "comma-separated positive ints"
    elif choices is not None:
        text = f"one of {{{', '.join(choices)}}}"
    else:
        text = kind.__name__ + (f" >= {lo}" if lo is not None else "")
    return parse, text


# key -> (parser, constraint text, default)
KEYS: dict[str, tuple] = {}


def _key(name, kind, default, lo=None, choices=None):
    parse, text = _typed(kind, lo, choices)
    KEYS[name] = (parse, text, default)


_key("dataset", str, "toy", choices=("toy", "idx"))
_key("toy_kind", str, "gaussian-blobs", choices=datasets.TOY_KINDS)
_key("num_classes", int, 5, lo=2)
_key("feature_dim", int, 16, lo=2)
_key("separation", float, 4.0, lo=1e-12)
_key("noise_scale", float, 2.0, lo=1e-12)
_key("data_seed", int, 0, lo=0)
_key("n_max", int, 500, lo=1)
_key("beta", float, 50.0, lo=1.0)
_key("n_test_per_class", int, 200, lo=1)
_key("idx_images", str, "")
_key("idx_labels", str, "")
_key("idx_test_images", str, "")
_key("idx_test_labels", str, "")
_key("hidden_widths", tuple, (64,))
_key("num_experts", int, 5, lo=1)
_key("expert_seed", int, 0, lo=0)
_key("balance_mode", str, "undersample", choices=datasets.RESAMPLE_MODES)
_key("rep_epochs", int, 40, lo=1)
_key("rep_lr", float, 0.05, lo=1e-12)
_key("rep_momentum", float, 0.9, lo=0.0)
_key("rep_weight_decay", float, 5e-4, lo=0.0)
_key("rep_batch_size", int, 64, lo=1)
_key("cls_epochs", int, 10, lo=1)
_key("cls_lr", float, 0.05, lo=1e-12)
_key("cls_momentum", float, 0.9, lo=0.0)
_key("cls_weight_decay", float, 0.0, lo=0.0)
_key("cls_batch_size", int, 64, lo=1)
_key("maxnorm_radius", float, 1.0, lo=1e-12)
_key("ipc", int, 10, lo=1)
_key("outer_steps", int, 500, lo=0)
_key("n_rep", int, 10, lo=0)
_key("n_cls", int, 5, lo=0)
_key("m_rep", int, 2, lo=1)
_key("m_cls", int, 1, lo=1)
_key("t_minus_rep", int, 0, lo=0)
_key("t_rep", int, 10, lo=0)
_key("t_plus_rep", int, 20, lo=0)
_key("t_minus_cls", int, 0, lo=0)
_key("t_cls", int, 1, lo=0)
_key("t_plus_cls", int, 1, lo=0)
_key("lambda_smooth", float, 1.0, lo=0.0)
_key("lambda_rep", float, 1.0, lo=0.0)
_key("lambda_cls", float, 0.5, lo=0.0)
_key("lr_images", float, 50.0, lo=0.0)
_key("lr_label_logits", float, 0.5, lo=0.0)
_key("lr_inner_lr", float, 1e-4, lo=0.0)
_key("inner_lr_init", float, 0.05, lo=1e-12)
_key("tail_strategy", str, "oversample", choices=distill.TAIL_STRATEGIES)
_key("distilled_distribution", str, "balanced", choices=distill.DISTRIBUTIONS)
_key("uniform_counts", bool, False)
_key("noise_label_magnitude", float, 6.0, lo=0.0)
_key("distill_seed", int, 0, lo=0)
_key("eval_epochs", int, 300, lo=0)
_key("eval_lr", float, 0.01, lo=1e-12)
_key("eval_momentum", float, 0.9, lo=0.0)
_key("eval_seed", int, 0, lo=0)
_key("eval_runs", int, 3, lo=1)
_key("baseline_method", str, "random", choices=("random", "kcenter"))
_key("tag", str, "")
_key("out_dir", str, "runs")


class RunConfig:
    """Typed view over the full key set, plus its canonical fingerprint.

    The fingerprint hashes every key except out_dir, so identical runs are
    byte-identical regardless of where their artifacts land.
    """

    def __init__(self, values: dict):
        self._values = values
        self.canonical_text = "\n".join(
            f"{k} = {_canon(values[k])}" for k in sorted(values) if k != "out_dir"
        )
        self.fingerprint = hashlib.sha256(self.canonical_text.encode()).hexdigest()[:12]

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None


def _canon(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; `#` starts a comment."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def build_config(config_path=None, overrides=()) -> RunConfig:
    raw = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                raw.update(parse_config_text(f.read()))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    values = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        parse, constraint, _ = KEYS[key]
        try:
            values[key] = parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"key {key} = {value!r} invalid: {exc}") from None
    for key, (_, _, default) in KEYS.items():
        values.setdefault(key, default)
    env_out = os.environ.get("LT_DISTILL_OUT")
    if env_out:
        values["out_dir"] = env_out
    return RunConfig(values)


# -- domain object builders ----------------------------------------------------


def _toy_spec(rc: RunConfig, seed: int) -> ToySpec:
    return ToySpec(
        kind=rc.toy_kind,
        num_classes=rc.num_classes,
        dim=rc.feature_dim,
        separation=rc.separation,
        noise=rc.noise_scale,
        seed=seed,
    )


def build_target(rc: RunConfig) -> datasets.LabeledSet:
    """The long-tailed training target D, regenerated from config."""
    if rc.dataset == "toy":
        pool = datasets.gen_toy(_toy_spec(rc, derive_seed(rc.data_seed, "train")), rc.n_max)
    else:
        pool = datasets.load_idx(rc.idx_images, rc.idx_labels)
    lt = LongTailSpec(beta=rc.beta, num_classes=pool.num_classes, n_max=rc.n_max)
    counts = datasets.longtail_counts(lt)
    return datasets.subsample_longtail(pool, counts, derive_seed(rc.data_seed, "subsample"))


def build_test(rc: RunConfig) -> datasets.LabeledSet:
    """The balanced test set T (disjoint seed stream from the target)."""
    if rc.dataset == "toy":
        return datasets.gen_toy(
            _toy_spec(rc, derive_seed(rc.data_seed, "test")), rc.n_test_per_class
        )
    pool = datasets.load_idx(rc.idx_test_images, rc.idx_test_labels)
    counts = np.full(pool.num_classes, rc.n_test_per_class, dtype=np.int64)
    return datasets.subsample_longtail(pool, counts, derive_seed(rc.data_seed, "test"))


def _mlp_spec(rc: RunConfig, input_dim: int, num_classes: int) -> models.MlpSpec:
    return models.MlpSpec((input_dim, *rc.hidden_widths, num_classes))


def _expert_paths(rc: RunConfig):
    return [
        (os.path.join(rc.out_dir, f"rep_{i:02d}.traj"),
         os.path.join(rc.out_dir, f"cls_{i:02d}.traj"))
        for i in range(rc.num_experts)
    ]


def load_expert_pools(rc: RunConfig):
    rep_pool, cls_pool = [], []
    for rep_path, cls_path in _expert_paths(rc):
        rep_pool.append(experts.load_trajectory(rep_path))
        cls_pool.append(experts.load_trajectory(cls_path))
    return rep_pool, cls_pool


def _distill_config(rc: RunConfig) -> DistillConfig:
    return DistillConfig(
        ipc=rc.ipc,
        outer_steps=rc.outer_steps,
        n_rep=rc.n_rep,
        n_cls=rc.n_cls,
        m_rep=rc.m_rep,
        m_cls=rc.m_cls,
        t_minus_rep=rc.t_minus_rep,
        t_rep=rc.t_rep,
        t_plus_rep=rc.t_plus_rep,
        t_minus_cls=rc.t_minus_cls,
        t_cls=rc.t_cls,
        t_plus_cls=rc.t_plus_cls,
        lambda_smooth=rc.lambda_smooth,
        lambda_rep=rc.lambda_rep,
        lambda_cls=rc.lambda_cls,
        lr_images=rc.lr_images,
        lr_label_logits=rc.lr_label_logits,
        lr_inner_lr=rc.lr_inner_lr,
        inner_lr_init=rc.inner_lr_init,
        tail_strategy=rc.tail_strategy,
        distilled_distribution=rc.distilled_distribution,
        uniform_counts=rc.uniform_counts,
        noise_label_magnitude=rc.noise_label_magnitude,
        seed=rc.distill_seed,
    )


# -- commands ------------------------------------------------------------------


def cmd_gen_data(rc: RunConfig) -> None:
    d = build_target(rc)
    t = build_test(rc)
    out = {
        "config_fingerprint": rc.fingerprint,
        "target_fingerprint": d.fingerprint(),
        "target_class_counts": d.class_counts.tolist(),
        "test_fingerprint": t.fingerprint(),
        "test_class_counts": t.class_counts.tolist(),
    }
    path = os.path.join(rc.out_dir, "dataset_fingerprints.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(out, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {path} (target n={len(d)}, counts={d.class_counts.tolist()})")


def cmd_train_experts(rc: RunConfig) -> None:
    d = build_target(rc)
    spec = _mlp_spec(rc, d.dim, d.num_classes)
    maxnorm = MaxNormConfig(rc.maxnorm_radius)
    for i, (rep_path, cls_path) in enumerate(_expert_paths(rc)):
        rep_cfg = TrainConfig(
            epochs=rc.rep_epochs, lr=rc.rep_lr, momentum=rc.rep_momentum,
            weight_decay=rc.rep_weight_decay, batch_size=rc.rep_batch_size,
            seed=derive_seed(rc.expert_seed, f"rep{i}"),
        )
        rep = experts.train_representation_expert(d, spec, rep_cfg)
        rep.fingerprint = f"{d.fingerprint()}:{rc.fingerprint}"
        experts.save_trajectory(rep_path, rep)
        b = datasets.balanced_resample(
            d, rc.balance_mode, derive_seed(rc.expert_seed, f"balance{i}")
        )
        cls_cfg = TrainConfig(
            epochs=rc.cls_epochs, lr=rc.cls_lr, momentum=rc.cls_momentum,
            weight_decay=rc.cls_weight_decay, batch_size=rc.cls_batch_size,
            seed=derive_seed(rc.expert_seed, f"cls{i}"),
        )
        cls = experts.train_classifier_expert(rep, b, cls_cfg, maxnorm)
        cls.fingerprint = f"{b.fingerprint()}:{rc.fingerprint}"
        experts.save_trajectory(cls_path, cls)
        print(f"expert {i}: saved {rep_path} and {cls_path}")


def cmd_distill(rc: RunConfig) -> None:
    d = build_target(rc)
    rep_pool, cls_pool = load_expert_pools(rc)
    cfg = _distill_config(rc)
    syn, records = distill.distill(d, rep_pool, cls_pool, cfg)
    syn_path = os.path.join(rc.out_dir, "synthetic.bin")
    trace_path = os.path.join(rc.out_dir, "trace.csv")
    distill.save_synthetic(syn_path, syn, rc.fingerprint)
    distill.write_trace(trace_path, records, rc.fingerprint)
    last = records[-1].loss_total if records else float("nan")
    print(f"wrote {syn_path} and {trace_path} (final loss {last:.6g})")


def _eval_records(rc: RunConfig, syn, method: str):
    t = build_test(rc)
    spec = _mlp_spec(rc, t.dim, t.num_classes)
    records = []
    for r in range(rc.eval_runs):
        seed = rc.eval_seed + r
        params = evalkit.train_on_synthetic(
            syn, spec, rc.eval_epochs, seed, lr=rc.eval_lr, momentum=rc.eval_momentum
        )
        records.append(
            evalkit.evaluate(params, t, method=method, seed=seed,
                             fingerprint=rc.fingerprint)
        )
    return records


def cmd_eval(rc: RunConfig) -> None:
    syn = distill.load_synthetic(os.path.join(rc.out_dir, "synthetic.bin"))
    method = rc.tag or "distilled"
    records = _eval_records(rc, syn, method)
    path = os.path.join(rc.out_dir, f"metrics_{method}.csv")
    evalkit.write_metrics(path, records, rc.fingerprint)
    accs = [r.accuracy for r in records]
    print(f"wrote {path} (mean acc {np.mean(accs):.4f})")


def cmd_baseline(rc: RunConfig) -> None:
    d = build_target(rc)
    seed = derive_seed(rc.data_seed, rc.baseline_method)
    if rc.baseline_method == "random":
        syn = evalkit.random_coreset(d, rc.ipc, seed)
    else:
        syn = evalkit.kcenter_coreset(d, rc.ipc, seed)
    method = rc.tag or rc.baseline_method
    records = _eval_records(rc, syn, method)
    path = os.path.join(rc.out_dir, f"metrics_{method}.csv")
    evalkit.write_metrics(path, records, rc.fingerprint)
    accs = [r.accuracy for r in records]
    print(f"wrote {path} (mean acc {np.mean(accs):.4f})")


def cmd_diag(rc: RunConfig) -> None:
    d = build_target(rc)
    lines = [f"# config_fingerprint={rc.fingerprint}",
             "stage,expert,class,recall,confidence,weight_norm"]
    for i, (rep_path, cls_path) in enumerate(_expert_paths(rc)):
        for path in (rep_path, cls_path):
            traj = experts.load_trajectory(path)
            final = traj.snapshots[-1]
            conf = experts.confidence_profile(final, d)
            norms = evalkit.weight_norm_profile(final)
            recall = (traj.per_class_recall if traj.per_class_recall is not None
                      else np.full(d.num_classes, np.nan))
            for c in range(d.num_classes):
                lines.append(
                    f"{traj.stage},{i},{c},{recall[c]:.6f},{conf[c]:.6f},{norms[c]:.6f}"
                )
    path = os.path.join(rc.out_dir, "diag.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {path}")


def cmd_report(rc: RunConfig) -> None:
    paths = sorted(glob.glob(os.path.join(rc.out_dir, "metrics_*.csv")))
    if not paths:
        raise FileNotFoundError(f"no metrics_*.csv files under {rc.out_dir}")
    records = []
    for p in paths:
        records.extend(evalkit.read_metrics(p))
    text, csv_text = evalkit.compare_report(records)
    with open(os.path.join(rc.out_dir, "report.txt"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(text)
    with open(os.path.join(rc.out_dir, "report.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(csv_text)
    print(text, end="")


_COMMAND_FNS = {
    "gen-data": cmd_gen_data,
    "train-experts": cmd_train_experts,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "diag": cmd_diag,
    "report": cmd_report,
}


def _key_listing() -> str:
    lines = ["configuration keys (override with --key=value):"]
    for name in sorted(KEYS):
        _, constraint, default = KEYS[name]
        lines.append(f"  {name:<24} default={_canon(default):<16} {constraint}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lt-distill",
        description="Distill long-tailed datasets into small balanced synthetic "
                    "sets by decoupled trajectory matching.",
        epilog=_key_listing(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="path to a key=value config file")
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = []
        for item in extra:
            if not item.startswith("--"):
                raise ConfigError(f"unexpected argument {item!r}")
            overrides.append(item[2:])
        rc = build_config(args.config, overrides)
        os.makedirs(rc.out_dir, exist_ok=True)
        _COMMAND_FNS[args.command](rc)
    except (ConfigError, datasets.IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
