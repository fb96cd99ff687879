"""Command-line entry point: ``sourcerer <subcommand> ...``.

Exit status is 0 on success.  On failure a single line
``error: <kind>: <message>`` goes to stderr and the status is 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .harness import ExperimentConfig, emit_reports, evaluate, run_experiment
from .methods import MethodConfig, adapt, train_dann, train_mme, train_supervised
from .nn import RngStream
from .regularize import LambdaSchedule, TrainBudget, lambda_for
from .tempcnn import load_checkpoint, save_checkpoint

log = logging.getLogger("sourcerer")


def _split_labelled(train: D.Dataset, polygons: int | None, seed: int):
    """First ``polygons`` of a seeded polygon ordering as labelled data, the
    rest as unlabelled.  ``None`` labels everything."""
    if polygons is None:
        return train, train.subset(np.zeros(0, np.int64))
    if polygons > len(train.polygons()):
        raise ValueError(f"asked for {polygons} polygons, {len(train.polygons())} available")
    order = D.polygon_order(train, RngStream(seed, "polygons"))
    return D.select_polygons(train, order[:polygons]), D.select_polygons(train, order[polygons:])


def _model_overrides(args) -> dict:
    out = {}
    if getattr(args, "filters", None) is not None:
        out["conv_filters"] = args.filters
    if getattr(args, "fc_units", None) is not None:
        out["fc_units"] = args.fc_units
    return out


def cmd_gen(args) -> None:
    spec = D.SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    out = Path(args.out)
    for name, ds in zip(("source", "target_train", "target_test"), D.generate_synthetic_pair(spec)):
        D.write_dataset(ds, out / name)
        print(f"{name}: {len(ds)} instances, {len(ds.polygons())} polygons -> {out / name}")


def cmd_train(args) -> None:
    ds = D.read_dataset(args.data)
    stats = D.compute_norm_stats(ds)
    cfg = MethodConfig("source-only", budget=TrainBudget(args.updates, args.batch), seed=args.seed, lr=args.lr,
                       model=_model_overrides(args))
    model, hist = train_supervised(D.normalize(ds, stats), cfg, freeze_after=True)
    model.norm_stats = stats
    save_checkpoint(model, args.out)
    print(f"trained {hist.updates} updates in {hist.seconds:.1f}s, final loss {hist.losses[-1]:.4f} -> {args.out}")


def _normalized_for(model, ds: D.Dataset) -> D.Dataset:
    if model.norm_stats is None:
        log.warning("checkpoint has no normalization statistics; using data as is")
        return ds
    return D.normalize(ds, model.norm_stats)


def cmd_adapt(args) -> None:
    source = load_checkpoint(args.model)
    ds = _normalized_for(source, D.read_dataset(args.data))
    labelled, _ = _split_labelled(ds, args.polygons, args.seed)
    kw = {"schedule": LambdaSchedule(t_max=args.tmax)} if args.method == "sourcerer" else {}
    cfg = MethodConfig(args.method, budget=TrainBudget(args.updates, args.batch), seed=args.seed, lr=args.lr, **kw)
    model, hist = adapt(source, labelled, args.method, cfg)
    model.norm_stats = source.norm_stats
    save_checkpoint(model, args.out)
    lam = hist.info.get("lambda")
    print(f"{args.method}: n_t={len(labelled)} updates={hist.updates}"
          + (f" lambda={lam!r}" if lam is not None else "") + f" -> {args.out}")


def cmd_pooled(args) -> None:
    source = D.read_dataset(args.source)
    stats = D.compute_norm_stats(source)
    source = D.normalize(source, stats)
    target = D.normalize(D.read_dataset(args.target), stats)
    labelled, unlabelled = _split_labelled(target, args.polygons, args.seed)
    kw = {"dann_alpha": args.alpha} if args.method == "dann" else {"mme_lambda": args.mme_lambda}
    cfg = MethodConfig(args.method, budget=TrainBudget(batch_size=args.batch), seed=args.seed, lr=args.lr,
                       model=_model_overrides(args), pooled_epochs=args.epochs, **kw)
    train = train_dann if args.method == "dann" else train_mme
    model, hist = train(source, labelled, unlabelled, cfg)
    model.norm_stats = stats
    save_checkpoint(model, args.out)
    print(f"{args.method}: labelled n_t={len(labelled)} unlabelled={len(unlabelled)} "
          f"updates={hist.updates} -> {args.out}")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.model)
    rep = evaluate(model, _normalized_for(model, D.read_dataset(args.data)))
    if args.report:
        Path(args.report).write_text(json.dumps(rep.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"accuracy={rep.accuracy!r} macro_f1={rep.macro_f1!r}")


def cmd_sweep(args) -> None:
    config = ExperimentConfig.from_json(args.config)
    results = run_experiment(config)
    paths = emit_reports(results, args.out, config.queries)
    n_err = sum(not r.ok for r in results)
    print(f"{len(results)} runs ({n_err} failed); wrote " + ", ".join(str(p) for p in paths.values()))


def cmd_lambda(args) -> None:
    sched = LambdaSchedule(t_max=args.tmax)
    print(f"lambda={lambda_for(args.nt, sched)!r} k={sched.k!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sourcerer", description="Source-regularized domain adaptation for "
                                "multivariate time-series classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def training_opts(sp, updates=True):
        if updates:
            sp.add_argument("--updates", type=int, default=5000, help="gradient-update budget")
        sp.add_argument("--batch", type=int, default=32)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("gen", help="generate a synthetic source/target dataset triple")
    sp.add_argument("--spec", required=True, help="JSON file with synthetic-spec fields")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a source model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    training_opts(sp)
    sp.add_argument("--filters", type=int)
    sp.add_argument("--fc-units", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", help="adapt a source model to labelled target data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", required=True, choices=["naive", "finetune", "sourcerer"])
    sp.add_argument("--tmax", type=float, default=1e6)
    sp.add_argument("--polygons", type=int, help="number of target polygons to label (default: all)")
    sp.add_argument("--out", required=True)
    training_opts(sp)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("pooled", help="train DANN or MME on source plus target data")
    sp.add_argument("--method", required=True, choices=["dann", "mme"])
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--polygons", type=int, default=0, help="labelled target polygons; the rest is unlabelled")
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--alpha", type=float, default=1.0, help="DANN gradient-reversal strength")
    sp.add_argument("--mme-lambda", type=float, default=0.1)
    sp.add_argument("--filters", type=int)
    sp.add_argument("--fc-units", type=int)
    sp.add_argument("--out", required=True)
    training_opts(sp, updates=False)
    sp.set_defaults(func=cmd_pooled)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", help="write the full metric report as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="run an experiment sweep from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("lambda", help="print the regularization strength for n_t instances")
    sp.add_argument("--tmax", type=float, default=1e6)
    sp.add_argument("--nt", type=int, required=True)
    sp.set_defaults(func=cmd_lambda)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
