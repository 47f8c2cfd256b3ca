"""Command-line entry point: ``seenn <subcommand> -c run.ini ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import load_config, write_config
from .conversion import ConversionError, ann_accuracy, build_ann, convert, train_ann
from .data import ParseError, load_cifar10_bin, load_idx, make_synthetic, standardize
from .early_exit import (ExitConfig, aet, confidence, dataset_outputs, empirical_aet,
                         infer_dataset, sweep_alpha, write_correctness, write_sweep)
from .efficiency import OpTrace, count_dynamic_sops, static_ratio, throughput_fixed, throughput_seenn1
from .numerics import ConfigError
from .policy import (PolicyTrainConfig, TimestepPolicy, default_policy_arch, infer_seenn2,
                     load_policy, save_policy, train_seenn2)
from .snn import build_snn, forward_temporal, load_network, save_network
from .training import TrainingDiverged, train, write_metrics_csv

log = logging.getLogger("seenn")


class UsageError(Exception):
    pass


# shared helpers ----------------------------------------------------------------------------

def load_datasets(cfg):
    d = cfg.data
    if d.source == "synthetic":
        train_ds, test_ds = make_synthetic(d.synthetic())
    elif d.source == "mnist":
        train_ds = load_idx(d.train_images, d.train_labels, "train")
        test_ds = load_idx(d.test_images, d.test_labels, "test")
    else:
        train_ds = load_cifar10_bin(d.train_files.split(","), "train")
        test_ds = load_cifar10_bin(d.test_files.split(","), "test")
    if d.per_class:
        train_ds = train_ds.first_per_class(d.per_class)
        test_ds = test_ds.first_per_class(d.per_class)
    if d.standardize:
        train_ds, test_ds = standardize(train_ds, test_ds)
    if tuple(train_ds.shape) != cfg.arch.in_shape:
        raise ConfigError(f"[arch] in_shape {cfg.arch.in_shape} does not match data {train_ds.shape}")
    if train_ds.n_classes != cfg.arch.n_classes:
        raise ConfigError(f"[arch] n_classes {cfg.arch.n_classes} but data has {train_ds.n_classes}")
    return train_ds, test_ds


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(stem, rows, header):
    """``stem.csv`` and its ``stem.json`` mirror with the same values."""
    write_metrics_csv(f"{stem}.csv", rows, header)
    records = [{k: _plain(r[k]) for k in header} for r in rows]
    write_json(f"{stem}.json", {"columns": header, "rows": records})


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _plain(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def read_table(stem):
    path = Path(f"{stem}.json")
    if not path.is_file():
        return None
    return json.loads(path.read_text())["rows"]


def _out_dir(args, cfg):
    out = Path(args.out or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(path, what="checkpoint"):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _int_list(text, flag):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in vals):
        raise UsageError(f"{flag}: timesteps must be >= 1")
    return vals


def _float_list(text, flag):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _prepare(args):
    overrides = {}
    for kv in args.set or ():
        key, sep, value = kv.partition("=")
        if not sep or "." not in key:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {kv!r}")
        overrides[key.strip()] = value
    cfg = load_config(args.config, overrides)
    nx.set_precision(cfg.run.precision)
    nx.seed(cfg.seed)
    return cfg


# subcommands ------------------------------------------------------------------------------

def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    train_ds, test_ds = load_datasets(cfg)
    tcfg = cfg.train.train_config(cfg.seed)
    write_config(out / "effective_config.ini", cfg)
    if args.ann:
        net = build_ann(cfg.arch, cfg.conversion.steps, cfg.conversion.ceiling)
        result = train_ann(net, train_ds, tcfg, val=test_ds)
        header = ["epoch", "loss", "lr", "acc"]
        ckpt = out / "ann.seen"
        table = "ann_metrics"
    else:
        net = build_snn(cfg.arch, cfg.train.neuron(), cfg.train.surrogate_config())
        result = train(net, train_ds, tcfg, val=test_ds)
        header = ["epoch", "loss", "lr"] + [f"acc_t{t}" for t in range(1, tcfg.T + 1)]
        ckpt = out / "model.seen"
        table = "train_metrics"
    save_network(ckpt, net, seed=cfg.seed)
    write_table(out / table, result.metrics, header)
    last = result.metrics[-1]
    print(" ".join(f"{k}={_fmt(last[k])}" for k in header))
    print(f"wrote {ckpt}")
    return 0


def cmd_convert(args, cfg):
    out = _out_dir(args, cfg)
    ann, _ = load_network(_checkpoint(args.ann, "ann"))
    _, test_ds = load_datasets(cfg)
    result = convert(ann)
    T = cfg.conversion.steps
    rep = result.report()
    rep["ann_accuracy"] = ann_accuracy(ann, test_ds)
    acc, _ = dataset_outputs(result.snn, test_ds, T)
    rep["snn_accuracy"] = float((acc[:, T - 1].argmax(axis=1) == test_ds.labels).mean())
    rep["timesteps"] = T
    save_network(out / "snn.seen", result.snn, source_id=result.source_id)
    write_json(out / "conversion.json", rep)
    write_table(out / "conversion_layers", result.layers, ["layer", "lambda", "threshold", "steps"])
    write_config(out / "effective_config.ini", cfg)
    print(f"ann_accuracy={rep['ann_accuracy']!r} snn_accuracy_T{T}={rep['snn_accuracy']!r}")
    return 0


def _histogram_columns(T_hdr):
    return [f"n_exit_t{t}" for t in range(1, T_hdr + 1)]


EVAL_COLUMNS = ["mode", "label", "T", "alpha", "beta", "accuracy", "avg_T", "aet",
                "empirical_aet", "total_macs", "total_sops", "energy_j"]


def _row(mode, label, T, alpha, beta, accuracy, exit_t, matrix, trace, energy, T_hdr):
    rep = count_dynamic_sops(trace, float(exit_t.mean()), energy)
    row = {"mode": mode, "label": label, "T": T, "alpha": alpha, "beta": beta,
           "accuracy": float(accuracy), "avg_T": float(exit_t.mean()),
           "aet": aet(matrix), "empirical_aet": empirical_aet(matrix),
           "total_macs": rep.total_macs, "total_sops": rep.total_sops, "energy_j": rep.energy_j}
    for t in range(1, T_hdr + 1):
        row[f"n_exit_t{t}"] = int((exit_t == t).sum())
    return row, rep


def _write_decisions(path, res):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "exit_t", "predicted", "confidence", "correct"])
        for d in res.decisions():
            w.writerow([d.sample, d.exit_t, d.predicted, repr(d.confidence), int(d.correct)])


def cmd_eval(args, cfg):
    mode = args.mode
    if args.alpha is not None and mode != "seenn1":
        raise UsageError("--alpha only applies to --mode seenn1")
    if args.force_full and mode != "seenn1":
        raise UsageError("--force-full only applies to --mode seenn1")
    if args.beta is not None and mode != "seenn2":
        raise UsageError("--beta only applies to --mode seenn2")
    if args.timesteps is not None and mode != "fixed":
        raise UsageError("--timesteps only applies to --mode fixed")
    if args.policy is not None and mode != "seenn2":
        raise UsageError("--policy only applies to --mode seenn2")
    alpha = cfg.exit.alpha if args.alpha is None else args.alpha
    if mode == "seenn1" and not (0 < alpha <= 1 or (alpha > 1 and args.force_full)):
        raise UsageError(f"alpha must lie in (0, 1] (got {alpha}); use --force-full for alpha > 1")

    out = _out_dir(args, cfg)
    net, _ = load_network(_checkpoint(args.ckpt, "ckpt"))
    net.eval()
    _, test_ds = load_datasets(cfg)
    energy = cfg.efficiency.model()
    cands = cfg.candidates()
    labels = test_ds.labels
    rows, reports = [], {}

    if mode == "fixed":
        Ts = _int_list(args.timesteps, "--timesteps") if args.timesteps else [cfg.train.T]
        T_hdr = max(max(Ts), cands[-1])
        acc, matrix = dataset_outputs(net, test_ds, max(Ts), cfg.exit.batch_size)
        for T in Ts:
            trace = OpTrace()
            for i in range(0, len(test_ds), cfg.exit.batch_size):
                forward_temporal(net, test_ds.images[i:i + cfg.exit.batch_size], T, trace)
            correct = acc[:, T - 1].argmax(axis=1) == labels
            exit_t = np.full(len(test_ds), T)
            row, rep = _row("fixed", f"fixed_T{T}", T, "", "", correct.mean(), exit_t,
                            matrix[:, :T], trace, energy, T_hdr)
            rows.append(row)
            reports[row["label"]] = rep
    else:
        T_max = cands[-1]
        T_hdr = T_max
        _, matrix = dataset_outputs(net, test_ds, T_max, cfg.exit.batch_size)
        trace = OpTrace()
        if mode == "seenn1":
            res = infer_dataset(net, test_ds, ExitConfig(alpha, cands), cfg.exit.batch_size, trace)
            label, beta = f"seenn1_a{alpha:g}", ""
        else:
            policy = load_policy(_checkpoint(args.policy, "policy"))
            if tuple(policy.candidates) != tuple(cands):
                raise ConfigError(f"policy candidates {policy.candidates} differ from config {cands}")
            beta = policy.beta if args.beta is None else args.beta
            res = infer_seenn2(net, policy, test_ds.images, labels, trace, cfg.exit.batch_size)
            label, alpha = f"seenn2_b{beta:g}", ""
        row, rep = _row(mode, label, T_max, alpha, beta, res.accuracy, res.exit_t, matrix,
                        trace, energy, T_hdr)
        rows.append(row)
        reports[label] = rep
        _write_decisions(out / f"decisions_{label}.csv", res)
        if args.throughput and mode == "seenn1":
            tp_exit = throughput_seenn1(net, test_ds.images, ExitConfig(alpha, cands),
                                        cfg.efficiency.throughput_trials)
            tp_fixed = throughput_fixed(net, test_ds.images, T_max, cfg.efficiency.throughput_trials)
            write_json(out / "throughput.json", {
                "seenn1_samples_per_s": tp_exit.samples_per_s, "seenn1_iqr_over_median": tp_exit.iqr_over_median,
                f"fixed_T{T_max}_samples_per_s": tp_fixed.samples_per_s,
                "fixed_iqr_over_median": tp_fixed.iqr_over_median, "avg_T": row["avg_T"]})

    write_correctness(out / "correctness.bin", matrix)
    header = EVAL_COLUMNS + _histogram_columns(T_hdr)
    stem = out / f"eval_{mode}"
    write_table(stem, rows, header)
    for label, rep in reports.items():
        rep.write_json(out / f"ops_{label}.json")
    write_config(out / "effective_config.ini", cfg)
    for r in rows:
        print(" ".join(f"{k}={_fmt(r[k])}" for k in EVAL_COLUMNS[1:]))
    return 0


def cmd_sweep(args, cfg):
    alphas = _float_list(args.alphas, "--alphas") if args.alphas else list(cfg.exit.alphas)
    if alphas != sorted(alphas):
        raise UsageError("--alphas must be in ascending order")
    if any(a <= 0 for a in alphas):
        raise UsageError("--alphas must be positive")
    out = _out_dir(args, cfg)
    net, _ = load_network(_checkpoint(args.ckpt, "ckpt"))
    net.eval()
    _, test_ds = load_datasets(cfg)
    cands = cfg.candidates()
    rows = sweep_alpha(net, test_ds, alphas, cands, cfg.exit.batch_size)
    acc, matrix = dataset_outputs(net, test_ds, cands[-1], cfg.exit.batch_size)
    write_sweep(out / "sweep.csv", out / "sweep.json", rows, cands)
    write_correctness(out / "correctness.bin", matrix)
    np.save(out / "confidence.npy", confidence(acc))
    write_json(out / "sweep_summary.json", {
        "candidates": list(cands), "aet": aet(matrix), "empirical_aet": empirical_aet(matrix),
        "fixed_accuracy": [float(v) for v in matrix.mean(axis=0)]})
    write_config(out / "effective_config.ini", cfg)
    for r in rows:
        print(" ".join(f"{k}={_fmt(v)}" for k, v in r.as_dict(cands).items()))
    return 0


def _policy_config(cfg, beta=None):
    p = cfg.policy
    return PolicyTrainConfig(p.epochs, p.batch_size, p.lr, p.policy_lr, p.momentum,
                             p.weight_decay, p.beta if beta is None else beta, cfg.seed,
                             p.train_backbone, p.freeze_norm_stats, p.max_grad_norm)


def cmd_policy_train(args, cfg):
    out = _out_dir(args, cfg)
    net, header = load_network(_checkpoint(args.ckpt, "ckpt"))
    train_ds, test_ds = load_datasets(cfg)
    cands = cfg.candidates()
    pcfg = _policy_config(cfg, args.beta)
    p = cfg.policy
    arch = default_policy_arch(net, len(cands), p.max_ratio, p.hidden, p.downsample)
    policy = TimestepPolicy(arch, cands, pcfg.beta, backbone=net, max_ratio=p.max_ratio)
    rows = train_seenn2(net, policy, train_ds, pcfg, val=test_ds)
    save_policy(out / "policy.seen", policy)
    save_network(out / "backbone_finetuned.seen", net, seed=cfg.seed)
    write_table(out / "policy_log", rows, ["epoch", "avg_T", "accuracy", "mean_reward", "beta"])
    write_json(out / "policy_ops.json", {"static_ratio": policy.ratio, "candidates": list(cands)})
    write_config(out / "effective_config.ini", cfg)
    last = rows[-1]
    print(f"avg_T={last['avg_T']!r} accuracy={last['accuracy']!r} static_ratio={policy.ratio!r}")
    return 0


def cmd_policy_eval(args, cfg):
    out = _out_dir(args, cfg)
    net, _ = load_network(_checkpoint(args.ckpt, "ckpt"))
    policy = load_policy(_checkpoint(args.policy, "policy"))
    net.eval()
    policy.net.eval()
    _, test_ds = load_datasets(cfg)
    cands = policy.candidates
    res = infer_seenn2(net, policy, test_ds.images, test_ds.labels, batch_size=cfg.exit.batch_size)
    acc, matrix = dataset_outputs(net, test_ds, cands[-1], cfg.exit.batch_size)
    row = {"beta": policy.beta, "accuracy": res.accuracy, "avg_T": res.avg_t,
           f"fixed_T{cands[-1]}_accuracy": float(matrix[:, -1].mean()),
           "static_ratio": static_ratio(policy.net, net)}
    header = list(row)
    if test_ds.difficulty is not None:
        for name, tag in (("easy", 0), ("hard", 1)):
            m = test_ds.difficulty == tag
            row[f"mean_T_{name}"] = float(res.exit_t[m].mean()) if m.any() else float("nan")
            header.append(f"mean_T_{name}")
    for t in cands:
        row[f"n_exit_t{t}"] = int((res.exit_t == t).sum())
        header.append(f"n_exit_t{t}")
    write_table(out / "policy_eval", [row], header)
    _write_decisions(out / f"decisions_seenn2_b{policy.beta:g}.csv", res)
    write_config(out / "effective_config.ini", cfg)
    print(" ".join(f"{k}={_fmt(row[k])}" for k in header))
    return 0


def cmd_report(args, cfg):
    from . import plots

    run_dir = Path(args.run_dir or args.out or cfg.run.output_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    figs = []
    fixed = read_table(run_dir / "eval_fixed") or []
    exits = (read_table(run_dir / "eval_seenn1") or []) + (read_table(run_dir / "eval_seenn2") or [])
    sweep = None
    if (run_dir / "sweep.json").is_file():
        sweep = json.loads((run_dir / "sweep.json").read_text())
    summary_path = run_dir / "sweep_summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.is_file() else None
    aet_value = summary["aet"] if summary else (fixed[-1]["aet"] if fixed else None)
    if fixed or sweep:
        path = run_dir / "accuracy_vs_timesteps.png"
        plots.accuracy_vs_timesteps(path, fixed, sweep["rows"] if sweep else (),
                                    [r for r in exits if r["mode"] == "seenn2"], aet_value)
        figs.append(path.name)
    if sweep:
        path = run_dir / "exit_composition.png"
        plots.exit_composition(path, sweep["rows"], sweep["candidates"])
        figs.append(path.name)
    energy_rows = fixed + exits
    if energy_rows:
        path = run_dir / "energy.png"
        plots.energy_comparison(path, energy_rows)
        figs.append(path.name)
    train_rows = read_table(run_dir / "train_metrics")
    if train_rows and "acc_t1" in train_rows[0]:
        T = sum(1 for k in train_rows[0] if k.startswith("acc_t"))
        path = run_dir / "training_curves.png"
        plots.training_curves(path, train_rows, T)
        figs.append(path.name)
    if not figs:
        raise UsageError(f"no evaluation outputs found in {run_dir}")
    rows = [{"label": r["label"], "mode": r["mode"], "accuracy": r["accuracy"], "avg_T": r["avg_T"],
             "energy_j": r["energy_j"], "total_sops": r["total_sops"]} for r in energy_rows]
    if sweep:
        rows += [{"label": f"sweep_a{r['alpha']:g}", "mode": "sweep", "accuracy": r["accuracy"],
                  "avg_T": r["avg_t"], "energy_j": "", "total_sops": ""} for r in sweep["rows"]]
    write_table(run_dir / "report", rows, ["label", "mode", "accuracy", "avg_T", "energy_j", "total_sops"])
    write_json(run_dir / "report_figures.json", {"figures": figs})
    for f in figs:
        print(f"wrote {run_dir / f}")
    return 0


# parser -------------------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="seenn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="INI run configuration")
        p.add_argument("-o", "--out", help="output directory (default: [run] output_dir)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a spiking network (or a quantized ANN with --ann)")
    p.add_argument("--ann", action="store_true", help="train the quantized ANN used for conversion")
    p = add("convert", cmd_convert, "convert a quantized ANN checkpoint into an IF spiking network")
    p.add_argument("--ann", help="ANN checkpoint")
    p = add("eval", cmd_eval, "evaluate fixed-T, confidence-exit or learned-exit inference")
    p.add_argument("--ckpt", help="spiking network checkpoint")
    p.add_argument("--mode", choices=("fixed", "seenn1", "seenn2"), default="fixed")
    p.add_argument("--timesteps", help="comma-separated T values (fixed mode)")
    p.add_argument("--alpha", type=float, help="confidence threshold (seenn1)")
    p.add_argument("--force-full", action="store_true", help="allow alpha > 1 (never exit early)")
    p.add_argument("--beta", type=float, help="label the row with this beta (seenn2)")
    p.add_argument("--policy", help="policy checkpoint (seenn2)")
    p.add_argument("--throughput", action="store_true",
                   help="also time seenn1 against fixed-T (wall clock, not reproducible)")
    p = add("sweep", cmd_sweep, "sweep the confidence threshold")
    p.add_argument("--ckpt", help="spiking network checkpoint")
    p.add_argument("--alphas", help="comma-separated ascending thresholds")
    p = add("policy-train", cmd_policy_train, "jointly finetune a backbone and a timestep policy")
    p.add_argument("--ckpt", help="warm-start spiking network checkpoint")
    p.add_argument("--beta", type=float, help="override [policy] beta")
    p = add("policy-eval", cmd_policy_eval, "evaluate a trained timestep policy")
    p.add_argument("--ckpt", help="finetuned backbone checkpoint")
    p.add_argument("--policy", help="policy checkpoint")
    p = add("report", cmd_report, "render figures from a run directory")
    p.add_argument("--run-dir", help="directory holding eval/sweep outputs")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _prepare(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"seenn: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ConversionError, ParseError, OSError, ValueError, KeyError) as exc:
        print(f"seenn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
