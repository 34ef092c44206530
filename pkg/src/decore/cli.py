"""Command-line entry point.

Settings are resolved as flags > ``--config`` JSON file > built-in defaults
and the effective configuration is stored in every JSON artifact, so a
checkpoint alone is enough to rebuild its data for ``eval`` or ``ablate``.

Config file layout::

    {"train": {<TrainConfig fields>},
     "data": {"kind": "synthetic", "n": 2000, "eval_n": 1000, "classes": 10,
              "shape": [1, 16, 16], "seed": 0, "eval_seed": 1}
          or {"kind": "idx", "train_images": ..., "train_labels": ...,
              "eval_images": ..., "eval_labels": ..., "num_classes": 10},
     "pretrain_epochs": 20}
"""
import argparse
import copy
import csv
import io
import json
import logging
import os
import sys

from . import accounting
from .data import load_idx, synth_data, write_idx
from .errors import DecoreError
from .search import Constraint, search_by_constraint, verify_constraint
from .training import (Checkpoint, TrainConfig, atomic_write_text, dumps_json, evaluate, fine_tune, load_checkpoint,
                       metrics_csv, save_checkpoint, train, train_baseline)

log = logging.getLogger("decore")

DEFAULT_DATA = {"kind": "synthetic", "n": 2000, "eval_n": 1000, "classes": 10, "shape": [1, 16, 16],
                "seed": 0, "eval_seed": 1}
DEFAULTS = {"train": TrainConfig().to_dict(), "data": DEFAULT_DATA, "pretrain_epochs": 20}
ABLATION_HEADER = ("checkpoint", "order", "k", "accuracy")
SWEEP_HEADER = ("lambda", "accuracy_before", "accuracy_after", "params_pruned_rate", "flops_pruned_rate")


class CliError(DecoreError):
    pass


# ----------------------------------------------------------------- config

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def effective_config(args, base=None):
    cfg = copy.deepcopy(DEFAULTS if base is None else base)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise CliError(f"{args.config}: not valid JSON ({e.msg} at line {e.lineno})") from e
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise CliError(f"{args.config}: unknown sections {sorted(unknown)}")
        if "data" in user and user["data"].get("kind", cfg["data"]["kind"]) != cfg["data"]["kind"]:
            cfg["data"] = {}
        cfg = _merge(cfg, user)
    t = cfg["train"]
    for flag, key in (("seed", "seed"), ("lam", "penalty"), ("epochs", "epochs"),
                      ("policy_stop_epoch", "policy_stop_epoch"), ("threshold", "threshold")):
        v = getattr(args, flag, None)
        if v is not None:
            t[key] = v
    if getattr(args, "pretrain_epochs", None) is not None:
        cfg["pretrain_epochs"] = args.pretrain_epochs
    TrainConfig.from_dict(t)     # validate early
    return cfg


def load_data(data_cfg):
    kind = data_cfg.get("kind")
    if kind == "synthetic":
        shape = tuple(data_cfg["shape"])
        tr = synth_data(data_cfg["seed"], data_cfg["n"], data_cfg["classes"], shape, split="train")
        ev = synth_data(data_cfg["eval_seed"], data_cfg["eval_n"], data_cfg["classes"], shape, split="eval")
        return tr, ev
    if kind == "idx":
        k = data_cfg.get("num_classes")
        tr = load_idx(data_cfg["train_images"], data_cfg["train_labels"], k, "train")
        ev = None
        if data_cfg.get("eval_images"):
            ev = load_idx(data_cfg["eval_images"], data_cfg["eval_labels"], k or tr.num_classes, "eval")
        return tr, ev
    raise CliError(f"unknown data kind {kind!r} (expected 'synthetic' or 'idx')")


def _ckpt_config(ckpt, args):
    """Effective config for a command operating on an existing checkpoint."""
    base = ckpt.extra.get("effective_config") or _merge(DEFAULTS, {"train": ckpt.config.to_dict()})
    return effective_config(args, base)


def _eval_set(cfg):
    tr, ev = load_data(cfg["data"])
    return ev if ev is not None else tr


def _with_suffix(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def _append_csv(path, header, row):
    """Append one row, rewriting the file atomically."""
    old = ""
    if os.path.exists(path):
        with open(path, encoding="utf-8", newline="") as f:
            old = f.read()
        first = old.splitlines()[0] if old else ""
        if old and first != ",".join(header):
            raise CliError(f"{path}: header {first!r} does not match {','.join(header)!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not old:
        w.writerow(header)
    w.writerow(row)
    atomic_write_text(path, old + buf.getvalue())


def _emit(obj):
    sys.stdout.write(dumps_json(obj))


# --------------------------------------------------------------- commands

def _run_training(cfg):
    config = TrainConfig.from_dict(cfg["train"])
    tr, ev = load_data(cfg["data"])
    init = None
    if cfg.get("pretrain_epochs"):
        init = train_baseline(config, tr, ev, epochs=cfg["pretrain_epochs"]).checkpoint
    return train(config, tr, ev, init=init)


def cmd_train(args):
    cfg = effective_config(args)
    res = _run_training(cfg)
    res.checkpoint.extra["effective_config"] = cfg
    res.pruned.extra["effective_config"] = cfg
    res.pruned.extra["original_graph"] = res.checkpoint.graph.to_dict()
    save_checkpoint(res.checkpoint, args.out)
    save_checkpoint(res.pruned, _with_suffix(args.out, ".pruned.json"))
    atomic_write_text(args.metrics or _with_suffix(args.out, ".metrics.csv"), metrics_csv(res.metrics))
    rep = res.report
    rep.extra["effective_config"] = cfg
    atomic_write_text(_with_suffix(args.out, ".report.json"), dumps_json(rep.to_dict()))
    atomic_write_text(_with_suffix(args.out, ".layers.csv"), rep.layers_csv())
    _emit({"checkpoint": args.out, "params_pruned_rate": rep.params_pr, "flops_pruned_rate": rep.flops_pr,
           "accuracy_before": rep.accuracy_before, "accuracy_after": rep.accuracy_after})
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    acc = evaluate(ckpt.graph, ckpt.params, _eval_set(cfg))
    doc = {"checkpoint": args.checkpoint, "stage": ckpt.stage, "accuracy": acc,
           "params": accounting.count_params(ckpt.graph), "flops": accounting.count_flops(ckpt.graph),
           "effective_config": cfg}
    if args.out:
        atomic_write_text(args.out, dumps_json(doc))
    _emit({"accuracy": acc})
    return 0


def _report_doc(original, ckpt, cfg, data=None):
    acc_b = acc_a = None
    if data is not None:
        acc_a = evaluate(ckpt.graph, ckpt.params, data)
    rep = accounting.compression_report(original, ckpt.graph, acc_b, acc_a)
    rep.extra["effective_config"] = cfg
    return rep


def cmd_prune(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    thr = cfg["train"]["threshold"]
    g2, p2, b2, _ = accounting.prune(ckpt.graph, ckpt.params, ckpt.bank, thr)
    extra = {"effective_config": cfg, "original_graph": ckpt.graph.to_dict()}
    out = Checkpoint(g2, p2, b2, ckpt.config, ckpt.epoch, "pruned", dict(ckpt.rng), extra)
    save_checkpoint(out, args.out)
    data = _eval_set(cfg) if args.evaluate else None
    rep = _report_doc(ckpt.graph, out, cfg, data)
    if data is not None:
        rep.accuracy_before = evaluate(ckpt.graph, ckpt.params, data)
    atomic_write_text(_with_suffix(args.out, ".report.json"), dumps_json(rep.to_dict()))
    atomic_write_text(_with_suffix(args.out, ".layers.csv"), rep.layers_csv())
    _emit({"checkpoint": args.out, "params_pruned_rate": rep.params_pr, "flops_pruned_rate": rep.flops_pr})
    return 0


def cmd_search(args):
    if (args.max_bytes is None) == (args.max_flops is None):
        raise CliError("give exactly one of --max-bytes or --max-flops")
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    c = Constraint(max_bytes=args.max_bytes, max_flops=args.max_flops)
    res = search_by_constraint(ckpt.graph, ckpt.params, ckpt.bank, c)
    extra = {"effective_config": cfg, "original_graph": ckpt.graph.to_dict(), "constraint": c.to_dict()}
    out = Checkpoint(res.graph, res.params, ckpt.bank.subset(res.keep), ckpt.config, ckpt.epoch, "pruned",
                     dict(ckpt.rng), extra)
    doc = res.report
    if args.fine_tune_epochs:
        tr, ev = load_data(cfg["data"])
        out = fine_tune(out, tr, ev, args.fine_tune_epochs).checkpoint
        doc.accuracy_after = evaluate(out.graph, out.params, ev if ev is not None else tr)
        doc.extra["fine_tune_epochs"] = args.fine_tune_epochs
    ok, measured = verify_constraint(out.graph, c)
    doc.extra.update(verify_constraint=ok, measured=measured, effective_config=cfg)
    atomic_write_text(args.out, dumps_json(doc.to_dict()))
    if args.checkpoint_out:
        save_checkpoint(out, args.checkpoint_out)
    _emit({"verify_constraint": ok, "measured": measured, "limit": c.limit, "removed": len(res.removed)})
    return 0


def cmd_ablate(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    acc = accounting.ablate_topk(ckpt.graph, ckpt.params, ckpt.bank, args.k, args.order, _eval_set(cfg))
    _append_csv(args.csv, ABLATION_HEADER, [os.path.basename(args.checkpoint), args.order, args.k, repr(acc)])
    _emit({"order": args.order, "k": args.k, "accuracy": acc})
    return 0


def cmd_sweep(args):
    cfg = effective_config(args)
    lams = [float(v) for v in args.lambdas.split(",") if v.strip()]
    if not lams:
        raise CliError("--lambdas is empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for lam in lams:
        run = _merge(cfg, {"train": {"penalty": lam}})
        res = _run_training(run)
        rep = res.report
        w.writerow([repr(lam), repr(rep.accuracy_before), repr(rep.accuracy_after), rep.params_pr, rep.flops_pr])
        log.info("lambda %g: params PR %.1f%%, accuracy %s", lam, rep.params_pr, rep.accuracy_after)
    atomic_write_text(args.out, buf.getvalue())
    atomic_write_text(_with_suffix(args.out, ".config.json"), dumps_json({"lambdas": lams, "effective_config": cfg}))
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_synth_data(args):
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 3:
        raise CliError(f"--shape needs C,H,W, got {args.shape!r}")
    ds = synth_data(args.seed, args.n, args.classes, shape, split=args.split)
    img, lab = f"{args.out}-images-idx3-ubyte", f"{args.out}-labels-idx1-ubyte"
    write_idx(img, lab, ds)
    _emit({"images": img, "labels": lab, "n": args.n, "classes": args.classes, "shape": list(shape)})
    return 0


def cmd_report(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _ckpt_config(ckpt, args)
    if ckpt.stage == "pruned":
        from .graph import GraphSpec
        if "original_graph" not in ckpt.extra:
            raise CliError(f"{args.checkpoint}: pruned checkpoint carries no original graph")
        original, pruned = GraphSpec.from_dict(ckpt.extra["original_graph"]), ckpt
    else:
        g2, p2, b2, _ = accounting.prune(ckpt.graph, ckpt.params, ckpt.bank, cfg["train"]["threshold"])
        original, pruned = ckpt.graph, Checkpoint(g2, p2, b2, ckpt.config, ckpt.epoch, "pruned")
    rep = _report_doc(original, pruned, cfg, _eval_set(cfg) if args.evaluate else None)
    atomic_write_text(args.out, dumps_json(rep.to_dict()))
    if args.layers_csv:
        atomic_write_text(args.layers_csv, rep.layers_csv())
    _emit({"params_pruned_rate": rep.params_pr, "flops_pruned_rate": rep.flops_pr,
           "params_after": rep.params_after, "flops_after": rep.flops_after})
    return 0


# ----------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="decore", description="Multi-agent REINFORCE channel pruning.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda", dest="lam", type=float, help="accuracy penalty")
        sp.add_argument("--threshold", type=float)

    sp = sub.add_parser("train", help="pretrain, run the agents, fine-tune and prune")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--policy-stop-epoch", type=int)
    sp.add_argument("--pretrain-epochs", type=int)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--metrics", help="metrics CSV (default: next to --out)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("prune", help="threshold the agents and remove channels")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--evaluate", action="store_true")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("search", help="derive an architecture under a byte or FLOPs budget")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--max-bytes", type=int)
    sp.add_argument("--max-flops", type=int)
    sp.add_argument("--fine-tune-epochs", type=int, default=0)
    sp.add_argument("--out", required=True, help="report JSON")
    sp.add_argument("--checkpoint-out")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("ablate", help="accuracy after dropping the k highest/lowest agents")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--order", choices=["highest", "lowest"], required=True)
    sp.add_argument("--csv", default="ablation.csv")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="train once per penalty and tabulate accuracy and compression")
    common(sp)
    sp.add_argument("--lambdas", default="5,10,50,100,200,500")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--policy-stop-epoch", type=int)
    sp.add_argument("--pretrain-epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth-data", help="write synthetic blobs as IDX files")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--shape", default="1,16,16")
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True, help="file prefix")
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("report", help="compression report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--layers-csv")
    sp.add_argument("--evaluate", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DecoreError, ValueError, KeyError, OSError) as e:
        msg = f"missing config key {e}" if isinstance(e, KeyError) else str(e)
        sys.stderr.write(f"decore {args.command}: error: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
