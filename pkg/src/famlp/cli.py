"""Command-line entry point.

Commands: ``famlp data generate|inspect``, ``famlp train``, ``famlp
eval``, ``famlp ablate``, ``famlp analyze``.  Declarative flat key=value
config files drive training; flags override file values and the
effective config is echoed into the run directory.  Exit codes: 0
success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import analysis, plots
from .data import (
    SplitSpec,
    generate_synthetic,
    leave_one_domain_out,
    load_dataset,
    save_dataset,
)
from .model import FAMLPModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    LOG_HEADER,
    TrainConfig,
    evaluate,
    evaluate_by_domain,
    format_log_row,
    train_model,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Config keys that parse but drive nothing; kept for compatibility with
# configs written against the full hyperparameter surface.
_IGNORED_KEYS = ("tau_r", "lambda_r")

_RUN_KEYS = {
    "data": str,
    "hold_out": str,
    "tag": str,
    "out": str,
    "ablate": str,
    "analyze_layer": int,
    "analyze_samples": int,
}

_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(value, typename):
    if typename == "bool":
        low = value.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typename == "int":
        return int(value)
    if typename == "float":
        return float(value)
    return value


def parse_config_file(path):
    entries = {}
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def build_configs(entries):
    """Split flat key=value entries into model/train/run settings."""
    model_kwargs, train_kwargs, run = {}, {}, {}
    for key, value in entries.items():
        try:
            if key in _MODEL_FIELDS:
                model_kwargs[key] = _coerce(value, _MODEL_FIELDS[key])
            elif key in _TRAIN_FIELDS:
                train_kwargs[key] = _coerce(value, _TRAIN_FIELDS[key])
            elif key in _RUN_KEYS:
                run[key] = _coerce(value, _RUN_KEYS[key].__name__)
            elif key in _IGNORED_KEYS:
                print(f"warning: config key {key!r} is accepted but ignored", file=sys.stderr)
            else:
                raise UsageError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise UsageError(f"bad value for config key {key!r}: {exc}") from None
    try:
        model_cfg = ModelConfig(**model_kwargs).validate()
        train_cfg = TrainConfig(**train_kwargs).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return model_cfg, train_cfg, run


def _apply_ablation(name, model_cfg, train_cfg):
    """Map an ablation shorthand onto the component toggles."""
    combos = {
        "none": (True, True, True),
        "no-aff": (False, False, False),
        "lff": (True, False, False),
        "lff+lre": (True, True, False),
        "lff+mus": (True, False, True),
        "mus": (False, False, True),
        "full": (True, True, True),
    }
    if name not in combos:
        raise UsageError(f"unknown ablation {name!r}; choose from {sorted(combos)}")
    lff, lre, mus = combos[name]
    model_cfg.aff_enabled = lff
    model_cfg.lre_enabled = lre and lff
    train_cfg.mus_enabled = mus


def echo_config(model_cfg, train_cfg, run):
    lines = []
    for cfg in (model_cfg, train_cfg):
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    for key in sorted(run):
        lines.append(f"{key} = {run[key]}")
    return "\n".join(lines) + "\n"


def _make_run_dir(out_root, tag):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(out_root, f"{stamp}-{tag}" if tag else stamp)
    suffix = 0
    while os.path.exists(path):
        suffix += 1
        path = os.path.join(out_root, f"{stamp}-{tag or 'run'}-{suffix}")
    os.makedirs(os.path.join(path, "ckpt"))
    return path


def run_training(dataset, hold_out, model_cfg, train_cfg, run_dir=None, ckpt_name=None):
    """Train on all domains but ``hold_out``; returns (model, accuracy,
    log rows)."""
    split = SplitSpec(hold_out, train_cfg.train_fraction, train_cfg.seed)
    train_set, _val_set, test_set = leave_one_domain_out(dataset, split)
    model = FAMLPModel(model_cfg, seed=train_cfg.seed)
    rows = []
    saver = None
    if run_dir is not None and train_cfg.ckpt_interval > 0:
        base = ckpt_name or hold_out

        def saver(epoch, mdl):
            if (epoch + 1) % train_cfg.ckpt_interval == 0:
                save_checkpoint(mdl, os.path.join(run_dir, "ckpt", f"{base}-epoch{epoch + 1}.ckpt"))

    model, _teacher = train_model(model, train_set, train_cfg, log_rows=rows, epoch_hook=saver)
    acc = evaluate(model, test_set)
    return model, acc, rows


def cmd_train(args):
    entries = parse_config_file(args.config) if args.config else {}
    entries.update(dict(kv.split("=", 1) for kv in args.set or []))
    model_cfg, train_cfg, run = build_configs(entries)
    if args.data:
        run["data"] = args.data
    if args.hold_out:
        run["hold_out"] = args.hold_out
    if args.seed is not None:
        train_cfg.seed = args.seed
    elif "seed" not in entries and "FAMLP_SEED" in os.environ:
        train_cfg.seed = int(os.environ["FAMLP_SEED"])
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.tag:
        run["tag"] = args.tag
    if args.out:
        run["out"] = args.out
    if args.ablate:
        run["ablate"] = args.ablate
    if "ablate" in run:
        _apply_ablation(run["ablate"], model_cfg, train_cfg)
    model_cfg.validate()
    train_cfg.validate()
    if "data" not in run:
        raise UsageError("no dataset: pass --data or set data = <dir> in the config")

    dataset = load_dataset(run["data"])
    holds = [run["hold_out"]] if run.get("hold_out") else dataset.domain_names
    for h in holds:
        if h not in dataset.domains:
            raise UsageError(f"unknown hold-out domain {h!r}; have {dataset.domain_names}")

    run_dir = _make_run_dir(run.get("out", "runs"), run.get("tag", ""))
    with open(os.path.join(run_dir, "config.echo"), "w") as f:
        f.write(echo_config(model_cfg, train_cfg, run))

    accuracies = []
    all_rows = []
    with open(os.path.join(run_dir, "log.csv"), "w") as log:
        log.write("held_out," + LOG_HEADER + "\n")
        for hold in holds:
            model, acc, rows = run_training(dataset, hold, model_cfg, train_cfg, run_dir)
            for r in rows:
                log.write(f"{hold},{format_log_row(r)}\n")
            save_checkpoint(model, os.path.join(run_dir, "ckpt", f"{hold}-final.ckpt"))
            accuracies.append((hold, acc))
            all_rows.extend(rows)
            print(f"held_out={hold} accuracy={acc:.6f}")

    avg = sum(a for _, a in accuracies) / len(accuracies)
    with open(os.path.join(run_dir, "report.csv"), "w") as f:
        f.write("held_out,accuracy\n")
        for hold, acc in accuracies:
            f.write(f"{hold},{acc:.6f}\n")
        f.write(f"average,{avg:.6f}\n")
    plots.save_accuracy_figure(
        accuracies + [("average", avg)], os.path.join(run_dir, "report.png")
    )
    plots.save_training_curves(all_rows, os.path.join(run_dir, "training_curves.png"))
    print(f"average accuracy {avg:.6f}; run directory {run_dir}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    per_domain = evaluate_by_domain(model, dataset)
    lines = ["domain,accuracy"]
    for name, acc in per_domain.items():
        lines.append(f"{name},{acc:.6f}")
    if args.hold_out:
        if args.hold_out not in per_domain:
            raise UsageError(f"unknown hold-out domain {args.hold_out!r}")
        lines.append(f"held_out_accuracy,{per_domain[args.hold_out]:.6f}")
    else:
        avg = sum(per_domain.values()) / len(per_domain)
        lines.append(f"average,{avg:.6f}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return 0


_ABLATION_GRID = (
    (False, False, False),
    (False, False, True),
    (True, False, False),
    (True, False, True),
    (True, True, False),
    (True, True, True),
)


def cmd_ablate(args):
    entries = parse_config_file(args.config) if args.config else {}
    entries.update(dict(kv.split("=", 1) for kv in args.set or []))
    model_cfg, train_cfg, run = build_configs(entries)
    if args.data:
        run["data"] = args.data
    if args.hold_out:
        run["hold_out"] = args.hold_out
    if args.seed is not None:
        train_cfg.seed = args.seed
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if "data" not in run:
        raise UsageError("no dataset: pass --data or set data = <dir> in the config")
    if "hold_out" not in run:
        raise UsageError("ablation needs a hold-out domain")
    dataset = load_dataset(run["data"])

    run_dir = _make_run_dir(run.get("out", args.out or "runs"), run.get("tag", "ablate"))
    with open(os.path.join(run_dir, "config.echo"), "w") as f:
        f.write(echo_config(model_cfg, train_cfg, run))

    def one_row(grid_row):
        from dataclasses import replace

        lff, lre, mus = grid_row
        m_cfg = replace(model_cfg, aff_enabled=lff, lre_enabled=lre and lff)
        t_cfg = replace(train_cfg, mus_enabled=mus)
        _, acc, _ = run_training(dataset, run["hold_out"], m_cfg, t_cfg)
        return acc

    results = []
    if args.parallel:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(4, len(_ABLATION_GRID))) as pool:
            results = list(pool.map(one_row, _ABLATION_GRID))
    else:
        for row in _ABLATION_GRID:
            results.append(one_row(row))

    table_path = os.path.join(run_dir, "ablation.csv")
    rows_for_plot = []
    with open(table_path, "w") as f:
        f.write("lff,lre,mus,accuracy\n")
        for (lff, lre, mus), acc in zip(_ABLATION_GRID, results):
            f.write(f"{int(lff)},{int(lre)},{int(mus)},{acc:.6f}\n")
            label = "+".join(n for n, on in (("lff", lff), ("lre", lre), ("mus", mus)) if on)
            rows_for_plot.append((label or "baseline", acc))
            print(f"lff={int(lff)} lre={int(lre)} mus={int(mus)} accuracy={acc:.6f}")
    plots.save_accuracy_figure(
        rows_for_plot, os.path.join(run_dir, "ablation.png"), title="Component ablation"
    )
    print(f"ablation table {table_path}")
    return 0


def cmd_analyze(args):
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if not 0 <= args.layer < model.config.depth:
        raise UsageError(f"layer {args.layer} out of range [0, {model.config.depth})")
    images_by_domain = {}
    for name, samples in dataset.domains.items():
        take = samples[: max(1, args.samples)]
        images_by_domain[name] = [s.image for s in take]
    curves = analysis.delta_amplitude(model, images_by_domain, args.layer)
    analysis.export_csv(curves, args.out)
    fig_path = os.path.splitext(args.out)[0] + ".png"
    plots.save_delta_amplitude_figure(curves, fig_path)
    print(f"wrote {args.out} and {fig_path}")
    return 0


def cmd_data_generate(args):
    ds = generate_synthetic(
        args.classes, args.per_domain, (args.channels, args.size, args.size), args.seed
    )
    save_dataset(ds, args.out)
    print(f"wrote dataset to {args.out}")
    print(ds.summary())
    return 0


def cmd_data_inspect(args):
    ds = load_dataset(args.dir)
    print(ds.summary())
    return 0


def build_parser():
    p = _Parser(prog="famlp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset generation and inspection")
    dsub = data.add_subparsers(dest="data_command", required=True)
    gen = dsub.add_parser("generate")
    gen.add_argument("--classes", type=int, default=7)
    gen.add_argument("--per-domain", type=int, default=60, dest="per_domain")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=int(os.environ.get("FAMLP_SEED", 1)))
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--channels", type=int, default=1)
    gen.set_defaults(func=cmd_data_generate)
    insp = dsub.add_parser("inspect")
    insp.add_argument("dir")
    insp.set_defaults(func=cmd_data_inspect)

    tr = sub.add_parser("train", help="leave-one-domain-out training")
    tr.add_argument("--config")
    tr.add_argument("--data")
    tr.add_argument("--hold-out", dest="hold_out")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--tag")
    tr.add_argument("--out")
    tr.add_argument("--ablate")
    tr.add_argument("--set", action="append", metavar="KEY=VALUE")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="frozen-model accuracy per domain")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--hold-out", dest="hold_out")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="component on/off grid")
    ab.add_argument("--config")
    ab.add_argument("--data")
    ab.add_argument("--hold-out", dest="hold_out")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--out")
    ab.add_argument("--parallel", action="store_true")
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.set_defaults(func=cmd_ablate)

    an = sub.add_parser("analyze", help="per-domain filter suppression curves")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--data", required=True)
    an.add_argument("--layer", type=int, default=0)
    an.add_argument("--out", default="curves.csv")
    an.add_argument("--samples", type=int, default=64)
    an.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, BrokenPipeError):  # pragma: no cover
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
