"""Command-line interface driving the full pipeline.

Subcommands: generate, simulate, train, eval, report, predict.  Every
run is reproducible from its JSON config: all randomness flows from the
seeds recorded there (or the --seed override), and rerunning a command
with identical inputs rewrites identical bytes.  Wall-clock timings are
never written into result files, only logged.

Exit codes: 0 success, 2 configuration or usage problems, 3 numerical
failures (solver non-convergence, training abort).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from .config import RunConfig
from .errors import CaseError, SolverError, TrainingError, ValidationError
from .geometry import load_tree
from .oracle import field_to_csv, simulate
from .pipeline.dataset import (generate_dataset, load_case, load_manifest,
                               select_cases)
from .pipeline.evaluate import (case_point_table, evaluate_cases,
                                oracle_predictor, write_results)
from .pipeline.report import render_report
from .pipeline.training import Models, Trainer, load_training_state

log = logging.getLogger("coroflow.cli")


def _load_config(args):
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig.default()


def _with_seed(config_obj, seed):
    return dataclasses.replace(config_obj, seed=seed) if seed is not None \
        else config_obj


def cmd_generate(args):
    cfg = _load_config(args)
    dataset_cfg = _with_seed(cfg.dataset, args.seed)
    out_dir = args.out or cfg.paths.data_dir
    manifest = generate_dataset(dataset_cfg, out_dir, workers=args.workers)
    print(f"generated {len(manifest['cases'])} cases "
          f"({len(manifest['failed'])} failed) in {out_dir}")
    return 0


def cmd_simulate(args):
    cfg = _load_config(args)
    tree = load_tree(args.tree)
    field = simulate(tree, cfg.physio(args.regime))
    for branch in tree.branches:
        distal = field.value_at(branch.branch_id, branch.length, "ffr")
        print(f"{branch.branch_id} distal_ffr={distal:.6f}")
    if args.out:
        field_to_csv(args.out, field)
        log.info("field written to %s", args.out)
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    train_cfg = _with_seed(cfg.training, args.seed)
    out_dir = args.out or cfg.paths.run_dir
    if args.resume:
        trainer = load_training_state(args.resume, cfg.paths.data_dir)
    else:
        models = Models.init(seed=train_cfg.seed, seg_cfg=cfg.segnet,
                             md_cfg=cfg.meshdeform, pn_cfg=cfg.pointnet,
                             dtype=train_cfg.np_dtype)
        trainer = Trainer(cfg.paths.data_dir, config=train_cfg, models=models)
    trainer.train(out_dir=out_dir)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.iteration} iterations; "
          f"final loss {last.get('total', float('nan')):.6f}; "
          f"checkpoint {os.path.join(out_dir, 'final.ckpt')}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    data_dir = args.data or cfg.paths.data_dir
    manifest = load_manifest(data_dir)
    entries = select_cases(manifest, split=args.split, kind=args.kind)
    if not entries:
        raise ValidationError(
            f"no cases with split={args.split!r} kind={args.kind!r} in {data_dir}")
    cases = [load_case(data_dir, e) for e in entries]

    n_points = cfg.training.point_count
    if args.oracle:
        predict = lambda case: oracle_predictor(case, n_points=n_points)  # noqa: E731
    else:
        if not args.checkpoint:
            raise ValidationError("eval needs --checkpoint (or --oracle)")
        trainer = load_training_state(args.checkpoint, data_dir)
        predict = trainer.predict_case

    cache = {}

    def cached_predict(case):
        cache[case.case_id] = predict(case)
        return cache[case.case_id]

    metrics = evaluate_cases(cases, cached_predict, regime=args.regime,
                             workers=args.workers)
    timing = metrics.pop("timing_s")
    out_dir = args.out or os.path.join(cfg.paths.run_dir, "eval")
    tables = {}
    for case in cases:
        pred, batch = cache[case.case_id][args.regime]
        tables[case.case_id] = case_point_table(case, batch, pred, args.regime)
    write_results(out_dir, metrics, tables)
    for cid in sorted(timing["per_case"]):
        log.info("inference %s: %.2f s", cid, timing["per_case"][cid])
    log.info("mean inference %.2f s, max %.2f s over %d cases",
             timing["mean"], timing["max"], metrics["n_cases"])
    down = metrics.get("downstream") or {}
    print(f"FFR NMAE {metrics['ffr_nmae_overall']:.4f} over "
          f"{metrics['n_points']} points / {metrics['n_cases']} cases; "
          f"results in {out_dir}")
    if down.get("n_pairs"):
        acc = down["classification"]["accuracy"]
        print(f"downstream pairs {down['n_pairs']}: "
              f"r={down.get('pearson_r')}, accuracy={acc}")
    return 0


def cmd_report(args):
    written = render_report(args.results, out_dir=args.out)
    print(f"report: {len(written)} files in {args.out or args.results}")
    return 0


def cmd_predict(args):
    cfg = _load_config(args)
    data_dir = args.data or cfg.paths.data_dir
    manifest = load_manifest(data_dir)
    matches = [e for e in manifest["cases"] if e["case_id"] == args.case]
    if not matches:
        raise ValidationError(f"case {args.case!r} not in {data_dir}")
    case = load_case(data_dir, matches[0])
    if args.oracle:
        predict = lambda c: oracle_predictor(c, n_points=cfg.training.point_count)  # noqa: E731
    else:
        if not args.checkpoint:
            raise ValidationError("predict needs --checkpoint (or --oracle)")
        trainer = load_training_state(args.checkpoint, data_dir)
        predict = trainer.predict_case
    start = time.perf_counter()
    pred_map = predict(case)
    elapsed = time.perf_counter() - start
    pred, batch = pred_map[args.regime]
    rows = case_point_table(case, batch, pred, args.regime)
    out_path = args.out or f"{args.case}_{args.regime}.csv"
    import csv
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    log.info("inference took %.2f s", elapsed)
    print(f"predicted {len(rows)} points for {args.case} ({args.regime}) "
          f"-> {out_path}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="coroflow",
        description="Synthetic coronary hemodynamics: dataset generation, "
                    "reduced-order simulation, joint training, evaluation, "
                    "and reporting.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False, workers=False, regime=False):
        p.add_argument("--config", help="run configuration JSON")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
        if workers:
            p.add_argument("--workers", type=int,
                           default=max(1, os.cpu_count() or 1),
                           help="parallel workers across cases")
        if regime:
            p.add_argument("--regime", choices=("rest", "hyperemic"),
                           default="hyperemic")

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    common(p, seed=True, workers=True)
    p.add_argument("--out", help="dataset directory (default: config paths)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="solve one tree with the oracle")
    common(p, regime=True)
    p.add_argument("tree", help="tree JSON file")
    p.add_argument("--out", help="write the sampled field CSV here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the three networks jointly")
    common(p, seed=True)
    p.add_argument("--out", help="run directory (default: config paths)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, workers=True, regime=True)
    p.add_argument("--checkpoint", help="training checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="oracle self-consistency instead of a checkpoint")
    p.add_argument("--data", help="dataset directory (default: config paths)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--kind", default=None, choices=("idealized", "tree"),
                   help="restrict to one case kind (default: all)")
    p.add_argument("--out", help="results directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render plots and tables from results")
    p.add_argument("results", help="directory written by eval")
    p.add_argument("--out", help="output directory (default: results dir)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("predict", help="end-to-end prediction for one case")
    common(p, regime=True)
    p.add_argument("--checkpoint", help="training checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="ground-truth-mask bypass instead of a checkpoint")
    p.add_argument("--data", help="dataset directory (default: config paths)")
    p.add_argument("--case", required=True, help="case id from the manifest")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, CaseError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except (SolverError, TrainingError) as exc:
        log.error("%s", exc)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
