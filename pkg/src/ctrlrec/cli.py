"""Command-line pipeline: synth, ingest, complete, augment, train, generate,
evaluate, ablate, report.

Every command writes into a run directory together with a manifest
(sha256 of inputs, resolved config echo, package versions, wall time).
Configuration comes from an optional `key = value` text file; command-line
flags override file values.  Dotted keys namespace the module blocks, e.g.
`train.lr = 0.001`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import autodiff as ad
from . import corpus
from . import evaluation as eval_mod
from . import model as model_mod
from . import train as train_mod
from .augment import AugmentSpec, augment_dataset
from .generate import GenRequest, generate
from .objectives import ObjectivePoint, grid_points


def _read_config_file(path):
    cfg = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg[key] = value
    return cfg


def _resolve(args, file_cfg, key, cast, default=None):
    """Flag > config file > default."""
    flag = getattr(args, key.split(".")[-1].replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in file_cfg:
        try:
            return cast(file_cfg[key])
        except ValueError:
            raise SystemExit(f"config field {key}: cannot parse {file_cfg[key]!r}")
    return default


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Run directory with a config echo written before execution and a
    manifest written at the end."""

    def __init__(self, path, command, config):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.command = command
        self.config = config
        self.inputs = {}
        self.outputs = []
        self.t0 = time.monotonic()
        with open(os.path.join(path, "config.echo"), "w", encoding="utf-8") as f:
            for k in sorted(config):
                f.write(f"{k} = {config[k]}\n")

    def add_input(self, path):
        self.inputs[path] = _sha256(path)

    def out(self, name):
        full = os.path.join(self.path, name)
        self.outputs.append(name)
        return full

    def finish(self):
        manifest = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "versions": {"ctrlrec": __version__, "numpy": np.__version__,
                         "python": sys.version.split()[0]},
            "wall_time_s": round(time.monotonic() - self.t0, 3),
        }
        with open(os.path.join(self.path, "manifest.json"), "w",
                  encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


def _load_dataset(args, run):
    scale = (args.rmin, args.rmax)
    run.add_input(args.categories)
    if getattr(args, "trajectories", None):
        run.add_input(args.trajectories)
        catalog = corpus.read_catalog_csv(args.categories)
        n_users = args.num_users
        if n_users is None:
            raise SystemExit("--num-users is required with --trajectories")
        return corpus.read_trajectories(args.trajectories, catalog, scale, n_users)
    run.add_input(args.interactions)
    return corpus.ingest_csv(args.interactions, args.categories, scale)


def _save_dataset(dataset, run):
    corpus.emit_csv(dataset, run.out("interactions.csv"), run.out("categories.csv"))
    corpus.write_trajectories(dataset, run.out("trajectories.csv"))


def _parse_point(text):
    try:
        r, d = (float(x) for x in text.split(","))
        return ObjectivePoint(r, d)
    except Exception:
        raise SystemExit(f"cannot parse objective point {text!r}; expected R,D")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, file_cfg):
    try:
        cats = tuple(int(x) for x in args.cats_per_item.split(","))
        lo, hi = cats
        greedy = tuple(float(x) for x in args.greedy_prob.split(","))
        sticky = tuple(float(x) for x in args.sticky_prob.split(","))
    except ValueError:
        raise SystemExit("cannot parse --cats-per-item, --greedy-prob or "
                         "--sticky-prob")
    config = {"seed": args.seed, "users": args.users, "items": args.items,
              "categories": args.num_categories, "traj_len": args.traj_len,
              "rank": args.rank, "rmin": args.rmin, "rmax": args.rmax,
              "cats_per_item": list(cats), "trajs_per_user": args.trajs_per_user,
              "greedy_prob": list(greedy), "sticky_prob": list(sticky),
              "category_tightness": args.category_tightness}
    run = RunDir(args.out, "synth", config)
    dataset, oracle = corpus.synth_dataset(
        args.users, args.items, args.num_categories, args.traj_len, args.rank,
        args.seed, args.rmin, args.rmax, cats_per_item=cats,
        trajs_per_user=args.trajs_per_user, greedy_prob=greedy,
        sticky_prob=sticky, category_tightness=args.category_tightness)
    _save_dataset(dataset, run)
    corpus.emit_oracle_csv(oracle, run.out("oracle.csv"), dense=args.dense_oracle)
    run.finish()
    return 0


def cmd_ingest(args, file_cfg):
    config = {"interactions": args.interactions, "categories": args.categories,
              "rmin": args.rmin, "rmax": args.rmax}
    run = RunDir(args.out, "ingest", config)
    run.add_input(args.interactions)
    run.add_input(args.categories)
    dataset = corpus.ingest_csv(args.interactions, args.categories,
                                (args.rmin, args.rmax))
    _save_dataset(dataset, run)
    with open(run.out("id_maps.json"), "w", encoding="utf-8") as f:
        json.dump({"users": dataset.user_id_map, "items": dataset.item_id_map},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    run.finish()
    return 0


def cmd_complete(args, file_cfg):
    config = {"rank": args.rank, "epochs": args.epochs, "lr": args.lr,
              "reg": args.reg, "seed": args.seed}
    run = RunDir(args.out, "complete", config)
    dataset = _load_dataset(args, run)
    oracle, mae = corpus.complete_matrix(dataset, args.rank, args.epochs,
                                         args.lr, args.reg, args.seed)
    corpus.emit_oracle_csv(oracle, run.out("oracle.csv"), dense=args.dense_oracle)
    with open(run.out("fit.json"), "w", encoding="utf-8") as f:
        json.dump({"train_mae": mae}, f)
        f.write("\n")
    run.finish()
    return 0


def cmd_augment(args, file_cfg):
    config = {"strategy": args.strategy, "rate": args.rate, "seed": args.seed,
              "horizon": args.horizon}
    run = RunDir(args.out, "augment", config)
    dataset = _load_dataset(args, run)
    spec = AugmentSpec(args.strategy, args.rate, args.seed)
    augmented = augment_dataset(dataset, spec, args.horizon)
    corpus.write_trajectories(augmented, run.out("trajectories.csv"))
    corpus.emit_csv(corpus.Dataset(
        augmented.catalog, tuple(t for t in augmented.trajectories
                                 if t.origin == "organic"),
        augmented.r_min, augmented.r_max, augmented.num_users),
        run.out("interactions.csv"), run.out("categories.csv"))
    run.finish()
    return 0


def cmd_train(args, file_cfg):
    mc = {
        "d_model": _resolve(args, file_cfg, "model.d_model", int, 32),
        "layers": _resolve(args, file_cfg, "model.layers", int, 1),
        "n_heads": _resolve(args, file_cfg, "model.n_heads", int, 2),
        "horizon": _resolve(args, file_cfg, "model.horizon", int, 10),
        "max_hist": _resolve(args, file_cfg, "model.max_hist", int, 50),
        "seed": _resolve(args, file_cfg, "model.seed", int, 0),
    }
    tc = {
        "epochs": _resolve(args, file_cfg, "train.epochs", int, 30),
        "batch_size": _resolve(args, file_cfg, "train.batch_size", int, 32),
        "lr": _resolve(args, file_cfg, "train.lr", float, 1e-3),
        "seed": _resolve(args, file_cfg, "train.seed", int, 0),
        "grad_clip": _resolve(args, file_cfg, "train.grad_clip", float, 1.0),
    }
    run = RunDir(args.out, "train", {"model": mc, "train": tc})
    dataset = _load_dataset(args, run)
    cfg = model_mod.ModelConfig(num_users=dataset.num_users,
                                vocab=dataset.catalog.num_items, **mc)
    windows = train_mod.make_windows(dataset, cfg.horizon, cfg.max_hist)
    if not windows:
        raise SystemExit("dataset yields no training windows at this horizon")
    if not args.checked:
        ad.set_checked(False)
    m = model_mod.Model(cfg)
    ckpt_dir = run.out("checkpoints")
    m, curve = train_mod.train(m, windows, train_mod.TrainConfig(**tc), ckpt_dir)
    ad.set_checked(True)
    train_mod.write_loss_curve(curve, run.out("loss.csv"))
    run.finish()
    return 0


def cmd_generate(args, file_cfg):
    run = RunDir(args.out, "generate", {"user": args.user, "point": args.point,
                                        "horizon": args.horizon, "mode": args.mode,
                                        "seed": args.seed})
    run.add_input(args.checkpoint)
    m = model_mod.Model.load(args.checkpoint)
    dataset = _load_dataset(args, run) if args.categories else None
    oracle = None
    if args.oracle and dataset is not None:
        run.add_input(args.oracle)
        oracle = corpus.read_oracle_csv(args.oracle, dataset.num_users,
                                        dataset.catalog.num_items,
                                        (args.rmin, args.rmax))
    mode, temperature = args.mode, 1.0
    if mode.startswith("sample:"):
        mode, temperature = "sample", float(args.mode.split(":", 1)[1])
    history = []
    if dataset is not None:
        users, hists = eval_mod.eval_histories(dataset, args.max_hist)
        history = dict(zip(users, hists)).get(args.user, [])
    req = GenRequest(args.user, tuple(history), _parse_point(args.point),
                     args.horizon, mode=mode, temperature=temperature,
                     seed=args.seed)
    result = generate(m, req, oracle,
                      dataset.catalog if dataset is not None else None)
    line = {"user": args.user, "point": [req.point.o_rate, req.point.o_div],
            "items": list(result.items)}
    if result.realized:
        line["rating"], line["diversity"] = result.realized
    text = json.dumps(line, sort_keys=True)
    print(text)
    with open(run.out("generated.jsonl"), "w", encoding="utf-8") as f:
        f.write(text + "\n")
    run.finish()
    return 0


def cmd_evaluate(args, file_cfg):
    epochs = tuple(int(e) for e in args.epochs.split(","))
    run = RunDir(args.out, "evaluate",
                 {"epochs": list(epochs), "horizon": args.horizon,
                  "max_hist": args.max_hist})
    dataset = _load_dataset(args, run)
    run.add_input(args.oracle)
    oracle = corpus.read_oracle_csv(args.oracle, dataset.num_users,
                                    dataset.catalog.num_items,
                                    (args.rmin, args.rmax))
    cfg = eval_mod.EvalConfig(points=tuple(grid_points()), checkpoints=epochs,
                              horizon=args.horizon, max_hist=args.max_hist)
    report = eval_mod.evaluate(args.checkpoints, dataset, oracle, cfg)
    report.write_csv(run.out("report.csv"))
    stats = eval_mod.controllability_stats(report) if len(epochs) >= 2 else {}
    with open(run.out("stats.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    run.finish()
    return 0


def cmd_ablate(args, file_cfg):
    values = [int(v) for v in args.values.split(",")]
    run = RunDir(args.out, "ablate", {"axis": args.axis, "values": values})
    dataset = _load_dataset(args, run)
    run.add_input(args.oracle)
    oracle = corpus.read_oracle_csv(args.oracle, dataset.num_users,
                                    dataset.catalog.num_items,
                                    (args.rmin, args.rmax))
    base = {"model": {"d_model": args.d_model, "max_hist": args.max_hist,
                      "seed": args.seed},
            "train": {"epochs": args.epochs, "lr": args.lr, "seed": args.seed}}
    if args.axis == "layers":
        base["model"]["horizon"] = args.horizon
    if not args.checked:
        ad.set_checked(False)
    rows = eval_mod.ablation_sweep(dataset, oracle, args.axis, values, base)
    ad.set_checked(True)
    eval_mod.write_ablation_csv(rows, args.axis, run.out("ablation.csv"))
    run.finish()
    return 0


def cmd_report(args, file_cfg):
    run = RunDir(args.out, "report", {"report": args.report})
    run.add_input(args.report)
    report = eval_mod.EvalReport.read_csv(args.report)
    stats = eval_mod.controllability_stats(report)
    with open(run.out("stats.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_dataset_args(p):
    p.add_argument("--interactions")
    p.add_argument("--categories", required=True)
    p.add_argument("--trajectories")
    p.add_argument("--num-users", type=int)
    p.add_argument("--rmin", type=float, default=1.0)
    p.add_argument("--rmax", type=float, default=5.0)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ctrlrec",
        description="Objective-conditioned sequential recommendation pipeline")
    parser.add_argument("--config", help="key = value configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--num-categories", type=int, default=12)
    p.add_argument("--traj-len", type=int, default=30)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--rmin", type=float, default=1.0)
    p.add_argument("--rmax", type=float, default=5.0)
    p.add_argument("--cats-per-item", default="1,3",
                   help="min,max categories per item")
    p.add_argument("--trajs-per-user", type=int, default=1)
    p.add_argument("--greedy-prob", default="0.5",
                   help="per-session greedy probabilities, comma separated; "
                        "negative values pick the lowest-rated item instead")
    p.add_argument("--sticky-prob", default="0.0",
                   help="per-session same-category stickiness, comma separated")
    p.add_argument("--category-tightness", type=float, default=0.0)
    p.add_argument("--dense-oracle", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="normalize raw CSV files")
    p.add_argument("--interactions", required=True)
    p.add_argument("--categories", required=True)
    p.add_argument("--rmin", type=float, default=1.0)
    p.add_argument("--rmax", type=float, default=5.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("complete", help="matrix-factorization oracle completion")
    _add_dataset_args(p)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--reg", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dense-oracle", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("augment", help="splice synthetic to-go trajectories")
    _add_dataset_args(p)
    p.add_argument("--strategy", choices=["rating", "diversity", "random"],
                   required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("train", help="fit the conditioned sequence model")
    _add_dataset_args(p)
    for flag, typ in (("--d-model", int), ("--layers", int), ("--n-heads", int),
                      ("--horizon", int), ("--max-hist", int), ("--epochs", int),
                      ("--batch-size", int), ("--lr", float),
                      ("--grad-clip", float), ("--seed", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--checked", action="store_true",
                   help="keep finiteness asserts on during training")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="objective-conditioned generation")
    _add_dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--oracle")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--point", required=True, help="R,D in [0,1]")
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--max-hist", type=int, default=50)
    p.add_argument("--mode", default="greedy", help="greedy or sample:T")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="controllability sweep over checkpoints")
    _add_dataset_args(p)
    p.add_argument("--checkpoints", required=True, help="checkpoint directory")
    p.add_argument("--epochs", required=True, help="comma list, e.g. 21,22,...,30")
    p.add_argument("--oracle", required=True)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--max-hist", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="layer / horizon sweep")
    _add_dataset_args(p)
    p.add_argument("--oracle", required=True)
    p.add_argument("--axis", choices=["layers", "horizon"], required=True)
    p.add_argument("--values", required=True, help="comma list of axis values")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--max-hist", type=int, default=50)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checked", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="controllability stats from a report CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    file_cfg = _read_config_file(args.config) if args.config else {}
    try:
        return args.fn(args, file_cfg)
    except FileNotFoundError as e:
        print(f"error [io]: {e}", file=sys.stderr)
        return 2
    except (corpus.ParseError, corpus.ValidationError) as e:
        print(f"error [data]: {e}", file=sys.stderr)
        return 3
    except (ValueError, LookupError) as e:
        print(f"error [config]: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
