"""Command-line entry point.

Subcommands: gen-task, train, refine-tea, infer, eval, export-policy.
Outputs default to ``$JOINTAUG_OUT/<command>`` (or ``./runs/<command>``)
when ``--out`` is not given.  Exit codes: 0 success, 1 usage or config
error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import meta, plotting
from . import tensor_net as tn
from .data import FORMAT_VERSION, TaskSpec, _write_blob, gen_task, load_dataset, load_task, save_task
from .errors import ConfigError, DataError, JointAugError, NumericError
from .metrics import report_rows, write_metrics_csv
from .policy import CLASS_NAMES, ClassPolicy, TeaPolicy, policy_from_json
from .tea_infer import AggregationPlan, aggregate, build_plan, identity_plan
from .transforms import default_tea_registry, destructive_tea_ops

log = logging.getLogger("jointaug")

OUT_ENV = "JOINTAUG_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _out_dir(args, command: str) -> Path:
    if args.out:
        root = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ENV, "runs")) / command
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_json(path: str | Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_checkpoint(path) -> tn.SegNet:
    try:
        return tn.load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _check_net_matches(net: tn.SegNet, n_classes: int) -> None:
    if net.channels[0] != 1 or net.n_classes != n_classes:
        raise ConfigError(f"checkpoint expects {net.channels[0]} input channel(s) and {net.n_classes} classes; "
                          f"dataset has 1 channel and {n_classes} classes")


# ------------------------------------------------------------------ gen-task

def cmd_gen_task(args) -> int:
    data = _read_json(args.config, "task config") if args.config else {}
    data.update(_parse_sets(args.set))
    spec = TaskSpec.from_json(data)
    out = _out_dir(args, "gen-task")
    splits = gen_task(spec, args.seed)
    save_task(out, spec, args.seed, splits)
    _write_json(out / "resolved_config.json", {"seed": args.seed, "spec": spec.to_json()})
    print(f"wrote task to {out} ({', '.join(f'{d.split}={len(d)}' for d in splits)})")
    return EXIT_OK


# --------------------------------------------------------------------- train

_TRAIN_FLAGS = {"mode": "mode", "seed": "seed", "n": "train_batch", "m": "val_batch", "cadence": "cadence",
                "epochs": "epochs", "iters_per_epoch": "iters_per_epoch"}


def resolve_run_config(args) -> meta.RunConfig:
    data = _read_json(args.config, "run config") if args.config else {}
    meta.RunConfig.from_json(data)  # reject unknown keys early, before overrides
    data.update(_parse_sets(args.set))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if getattr(args, "no_cadence", False):
        data["cadence"] = None
    if getattr(args, "inject_bad_tra", False):
        data["inject_bad_tra"] = True
    if getattr(args, "inject_bad_tea", False):
        data["inject_bad_tea"] = True
    return meta.RunConfig.from_json(data)


def _truncate_jsonl(path: Path, keep) -> list[dict]:
    if not path.exists():
        return []
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    rows = [r for r in rows if keep(r)]
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return rows


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    train_set, val_set, test_set = load_task(args.task)
    if cfg.channels[0] != 1 or cfg.channels[-1] != train_set.n_classes:
        raise ConfigError(f"channels: must start at 1 and end at the task's {train_set.n_classes} classes")
    out = _out_dir(args, "train")
    state_dir = out / "state"
    history_path = out / "history.jsonl"
    traj_path = out / "policy_trajectory.jsonl"

    state = None
    if args.resume and (state_dir / "state.json").exists():
        saved = _read_json(out / "resolved_config.json", "resolved config")
        if saved != cfg.to_json():
            raise ConfigError("--resume needs the same configuration as the interrupted run")
        state = meta.load_state(state_dir)
        done = state.iteration
        _truncate_jsonl(history_path, lambda r: r["iteration"] < done)
        _truncate_jsonl(traj_path, lambda r: r["iteration"] <= done)
        log.info("resuming at iteration %d", done)
    else:
        for p in (history_path, traj_path):
            p.unlink(missing_ok=True)
        shutil.rmtree(state_dir, ignore_errors=True)
    _write_json(out / "resolved_config.json", cfg.to_json())

    slots, ops = meta.build_registries(cfg)
    if state is None:
        state = meta.MetaState.fresh(cfg, slots, ops)
        with traj_path.open("a") as fh:
            fh.write(json.dumps({"iteration": 0, "tra": state.tra.to_json(0), "tea": state.tea.to_json(0)},
                                sort_keys=True) + "\n")
    stop = cfg.iterations if args.stop_at is None else min(args.stop_at, cfg.iterations)

    with history_path.open("a") as hist, traj_path.open("a") as traj:
        while state.iteration < stop:
            state, rec = meta.joint_iteration(state, cfg, train_set, val_set)
            if rec.get("cadence") or state.iteration == cfg.iterations:
                rec["policy_ref"] = state.iteration
                traj.write(json.dumps({"iteration": state.iteration, "tra": state.tra.to_json(state.iteration),
                                       "tea": state.tea.to_json(state.iteration)}, sort_keys=True) + "\n")
            hist.write(json.dumps(rec, sort_keys=True) + "\n")
            if state.iteration % cfg.iters_per_epoch == 0 or state.iteration == stop:
                hist.flush()
                traj.flush()
                meta.save_state(state, state_dir)
                log.info("iteration %d train_loss %.4f", state.iteration, rec["train_loss"])
    if state.iteration < cfg.iterations:
        print(f"stopped at iteration {state.iteration} of {cfg.iterations}; continue with --resume")
        return EXIT_OK

    tn.save_checkpoint(state.net, out / "net.ckpt")
    _write_json(out / "tra_policy.json", state.tra.to_json(state.iteration))
    _write_json(out / "tea_policy.json", state.tea.to_json(state.iteration))
    rows = []
    run = f"{cfg.mode}-s{cfg.seed}"
    for tea_name, plan in meta.eval_plans(cfg, state).items():
        rows.extend(report_rows(meta.evaluate(state.net, test_set, plan), run, cfg.mode, tea_name))
    write_metrics_csv(out / "metrics.csv", rows)
    if not args.no_plots:
        history = [json.loads(line) for line in history_path.read_text().splitlines()]
        snaps = [json.loads(line)["tra"] for line in traj_path.read_text().splitlines()]
        plotting.plot_training_curves(history, out / "training_curves.png")
        plotting.plot_tra_policy(state.tra.to_json(state.iteration), out / "tra_policy.png")
        plotting.plot_tea_policy(state.tea.to_json(state.iteration), out / "tea_policy.png")
        plotting.plot_op_trajectories(snaps, out / "tra_trajectory.png")
    mean = [r for r in rows if r["class"] in ("mean", 1)]
    for r in mean:
        print(f"{r['arm']} tea={r['tea']} dsc={r['dsc']:.4f}")
    print(f"wrote run to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- refine-tea

def cmd_refine_tea(args) -> int:
    net = _load_checkpoint(args.checkpoint)
    val = load_dataset(Path(args.task) / "val")
    _check_net_matches(net, val.n_classes)
    if args.policy:
        tea = TeaPolicy.from_json(_read_json(args.policy, "TEA policy"))
    else:
        ops = default_tea_registry()
        if args.inject_bad_tea:
            ops = ops + destructive_tea_ops(len(ops))
        tea = TeaPolicy.init(ops, args.init)
    if args.iterations < 1 or args.draws < 2 or args.lr <= 0:
        raise ConfigError("iterations must be >= 1, draws >= 2 and lr > 0")
    out = _out_dir(args, "refine-tea")
    resolved = {"checkpoint": str(args.checkpoint), "iterations": args.iterations, "draws": args.draws,
                "lr": args.lr, "seed": args.seed, "loss": args.loss, "init": args.init,
                "inject_bad_tea": args.inject_bad_tea, "policy": args.policy}
    _write_json(out / "resolved_config.json", resolved)
    initial = tea.probs()
    tea, history = meta.refine_tea(net, tea, val, args.iterations, args.draws, args.lr, args.seed, args.loss)
    _write_json(out / "tea_policy.json", tea.to_json(args.iterations))
    with (out / "history.jsonl").open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if not args.no_plots:
        plotting.plot_tea_policy(tea.to_json(args.iterations), out / "tea_policy.png")
    final = tea.probs()
    top = np.argsort(-final, kind="stable")[:5]
    for k in top:
        print(f"{tea.ops[k].name}: {initial[k]:.4f} -> {final[k]:.4f}")
    print(f"wrote TEA policy to {out / 'tea_policy.json'}")
    return EXIT_OK


# ------------------------------------------------------------- infer / eval

def _plan_from_args(args, ops_hint=None) -> AggregationPlan:
    if args.tea_policy:
        tea = TeaPolicy.from_json(_read_json(args.tea_policy, "TEA policy"))
    else:
        tea = TeaPolicy.init(ops_hint or default_tea_registry(), "heuristic")
    if args.plan == "none":
        return identity_plan(tea.ops)
    if args.plan == "heuristic":
        return meta.heuristic_tea_plan(tea.ops, args.z)
    if not args.tea_policy:
        raise ConfigError("--plan learned needs --tea-policy")
    return build_plan(tea, args.z)


def _dataset_arg(args):
    return load_dataset(Path(args.task) / args.split) if args.task else load_dataset(args.dataset)


def cmd_infer(args) -> int:
    net = _load_checkpoint(args.checkpoint)
    ds = _dataset_arg(args)
    _check_net_matches(net, ds.n_classes)
    plan = _plan_from_args(args)
    out = _out_dir(args, "infer")
    probs = np.empty((len(ds), ds.n_classes) + ds.labels.shape[1:], dtype=np.float32)
    labels = np.empty(ds.labels.shape, dtype=np.uint8)
    for i, img in enumerate(ds.images):
        p, lab = aggregate(net, img[0], plan)
        probs[i], labels[i] = p, lab
    manifest = {
        "version": FORMAT_VERSION,
        "split": ds.split,
        "n_classes": ds.n_classes,
        "count": len(ds),
        "plan": dict(plan.to_json(), kind=args.plan),
        "checkpoint": str(args.checkpoint),
        "blobs": {
            "probabilities": _write_blob(out / "probabilities.bin", probs, "f32le"),
            "labels": _write_blob(out / "labels.bin", labels, "u8"),
        },
    }
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "resolved_config.json", {k: v for k, v in vars(args).items() if k != "func"})
    print(f"wrote {len(ds)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_checkpoint(args.checkpoint)
    ds = _dataset_arg(args)
    _check_net_matches(net, ds.n_classes)
    plan = _plan_from_args(args)
    out = _out_dir(args, "eval")
    report = meta.evaluate(net, ds, plan)
    rows = report_rows(report, args.run, args.arm, args.plan)
    write_metrics_csv(out / "metrics.csv", rows)
    _write_json(out / "resolved_config.json", {k: v for k, v in vars(args).items() if k != "func"})
    for r in rows:
        print(f"class={r['class']} dsc={r['dsc']:.4f} sen={r['sen']:.4f} prc={r['prc']:.4f} hd95={r['hd95']:.3f}")
    return EXIT_OK


# ------------------------------------------------------------- export-policy

PIE_FIELDS = ["slot_id", "slot", "op", "bin", "lo", "hi", "prob_bg", "prob_fg", "logit_bg", "logit_fg"]
TEA_FIELDS = ["op_id", "name", "prob", "logit"]


def export_policy_tables(policy_json: dict) -> dict:
    """Per-slot probability tables with FG and BG side by side (TRA) or the op list (TEA)."""
    policy = policy_from_json(policy_json)
    if isinstance(policy, ClassPolicy):
        slots = []
        for s, slot in enumerate(policy.slots):
            pb, pf = policy.probs(0, s), policy.probs(1, s)
            lb, lf = policy.table(0, s), policy.table(1, s)
            slots.append({"slot_id": slot.slot_id, "slot": slot.name, "bins": [
                {"op": b.kind, "bin": b.label, "lo": b.lo, "hi": b.hi, "prob_bg": float(pb[j]),
                 "prob_fg": float(pf[j]), "logit_bg": float(lb[j]), "logit_fg": float(lf[j])}
                for j, b in enumerate(slot.bins)]})
        return {"kind": "tra", "iteration": policy_json.get("iteration", 0), "classes": list(CLASS_NAMES),
                "tied": policy.tied, "slots": slots}
    p = policy.probs()
    return {"kind": "tea", "iteration": policy_json.get("iteration", 0),
            "ops": [{"op_id": op.op_id, "name": op.name, "prob": float(p[k]), "logit": float(policy.logits[k])}
                    for k, op in enumerate(policy.ops)]}


def cmd_export_policy(args) -> int:
    data = _read_json(args.policy, "policy")
    tables = export_policy_tables(data)
    out = _out_dir(args, "export-policy")
    stem = Path(args.policy).stem
    _write_json(out / f"{stem}_pie.json", tables)
    with (out / f"{stem}_pie.csv").open("w", newline="") as fh:
        if tables["kind"] == "tra":
            writer = csv.DictWriter(fh, fieldnames=PIE_FIELDS, lineterminator="\n")
            writer.writeheader()
            for slot in tables["slots"]:
                for b in slot["bins"]:
                    writer.writerow({"slot_id": slot["slot_id"], "slot": slot["slot"],
                                     **{k: repr(v) if isinstance(v, float) else v for k, v in b.items()}})
        else:
            writer = csv.DictWriter(fh, fieldnames=TEA_FIELDS, lineterminator="\n")
            writer.writeheader()
            for o in tables["ops"]:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in o.items()})
    if not args.no_plots:
        if tables["kind"] == "tra":
            plotting.plot_tra_policy(data, out / f"{stem}.png")
        else:
            plotting.plot_tea_policy(data, out / f"{stem}.png")
    print(f"exported {tables['kind']} policy to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jointaug", description="Learned class-specific train- and test-time augmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help="output directory"):
        p.add_argument("--out", help=f"{out_help} (default: ${OUT_ENV}/<command>)")
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    p = sub.add_parser("gen-task", help="generate a synthetic imbalanced segmentation task")
    p.add_argument("--config", help="TaskSpec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a TaskSpec field")
    p.add_argument("--out", help=f"task directory (default: ${OUT_ENV}/gen-task)")
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("train", help="train a segmenter under one augmentation arm")
    p.add_argument("--task", required=True, help="task directory from gen-task")
    p.add_argument("--config", help="RunConfig JSON; flags override its values")
    p.add_argument("--mode", choices=meta.MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="training batch size")
    p.add_argument("--m", type=int, help="validation batch size")
    p.add_argument("--cadence", type=int, help="policy update period in iterations")
    p.add_argument("--no-cadence", action="store_true", help="never update policies")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", type=int)
    p.add_argument("--inject-bad-tra", action="store_true", help="add destructive ops to the TRA noise slot")
    p.add_argument("--inject-bad-tea", action="store_true", help="add destructive ops to the TEA pool")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any RunConfig field")
    p.add_argument("--resume", action="store_true", help="continue an interrupted run in --out")
    p.add_argument("--stop-at", type=int, help="stop after this many iterations (resume later)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine-tea", help="learn a TEA policy against a frozen checkpoint")
    p.add_argument("--task", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", help="starting TEA policy JSON (default: fresh pool)")
    p.add_argument("--init", choices=("heuristic", "uniform"), default="heuristic")
    p.add_argument("--inject-bad-tea", action="store_true")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--draws", type=int, default=8)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--loss", choices=sorted(tn.LOSS_TERMS), default="dice")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_refine_tea)

    for name, func, helptext in (("infer", cmd_infer, "write probability and label maps"),
                                 ("eval", cmd_eval, "score a checkpoint on a split")):
        p = sub.add_parser(name, help=helptext)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--task", help="task directory (with --split)")
        src.add_argument("--dataset", help="single dataset directory")
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--tea-policy", help="TEA policy JSON")
        p.add_argument("--plan", choices=("none", "heuristic", "learned"), default="none")
        p.add_argument("--z", type=int, default=4, help="number of TEA ops to ensemble")
        if name == "eval":
            p.add_argument("--run", default="eval")
            p.add_argument("--arm", default="checkpoint")
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("export-policy", help="export pie-chart data and figures for a policy")
    p.add_argument("--policy", required=True)
    common(p)
    p.set_defaults(func=cmd_export_policy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JointAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
