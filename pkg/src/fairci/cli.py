"""Command-line entry point: ``fairci <command> [options]``."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import ci_engine, fairmetrics, harness, nets, synthgen
from .errors import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3


def _spec(args) -> harness.ExperimentSpec:
    spec = harness.load_spec(args.config) if args.config else harness.ExperimentSpec().validate()
    if args.out:
        spec.out_dir = str(args.out)
    if args.emit_plots:
        spec.emit_plots = True
    if getattr(args, "no_reuse", False):
        spec.reuse_runs = False
    if args.seed is not None and args.command != "generate":
        spec.seeds = (args.seed,)
    return spec


def cmd_generate(args, spec):
    data = spec.data if args.seed is None else replace(spec.data, seed=args.seed)
    out = harness._ensure_dir(spec.out)
    for split, ds in harness.datasets(data).items():
        path = synthgen.save_dataset(ds, out / f"{split}.npz")
        print(f"{split}: {len(ds)} images -> {path}")


def cmd_train(args, spec):
    if args.variant:
        for v in args.variant:
            harness._check_variant("--variant", v)
        if args.lambda_ is not None:
            spec.lambdas = {**spec.lambdas, **{v: args.lambda_ for v in args.variant}}
    rows = harness.run_experiment(spec, variants=args.variant)
    for r in rows:
        print(f"{r['model']:>15} seed={r['seed']} lambda={r['lambda']:g} "
              f"bacc={r['bacc']:.4f} dcor2_latent={r['dcor2_latent']:.4f} eo_gap={r['eo_gap']:.4f}")
    print(f"results -> {spec.out / 'results.csv'}")


def cmd_evaluate(args, spec):
    encoder, seed = nets.load_checkpoint(args.checkpoint)
    ds = harness.datasets(spec.data)[args.split]
    rep = ci_engine.evaluate(encoder, ds, spec.training.s_binarization_threshold)
    row = {"model": Path(args.checkpoint).stem, "seed": seed, "lambda": None, **rep.flat()}
    out = harness._ensure_dir(spec.out)
    stem = f"eval_{Path(args.checkpoint).stem}_{args.split}"
    fairmetrics.write_csv([row], out / f"{stem}.csv")
    text = fairmetrics.text_report(row)
    (out / f"{stem}.txt").write_text(text)
    print(text, end="")


def cmd_cv(args, spec):
    res = harness.crossval_lambda(spec, args.variant, grid=args.grid, k=args.k)
    for r in res.summary:
        mark = " *" if r["selected"] else ""
        print(f"lambda={r['lambda']:g} mean_bacc={r['mean_bacc']:.4f} mean_dcor2={r['mean_dcor2']:.4f}{mark}")
    print(f"selected lambda: {res.best_lambda:g}")


def cmd_sweep(args, spec):
    rows = harness.sweep_lambda(spec, lambdas=args.lambdas, variants=args.variant)
    for variant in dict.fromkeys(r["variant"] for r in rows):
        for lam, m in harness.sweep_means(rows, variant).items():
            print(f"{variant:>12} lambda={lam:g} bacc={m['bacc']:.4f} dcor2_latent={m['dcor2_latent']:.4f}")
    print(f"sweep -> {spec.out / 'sweep.csv'}")


def cmd_grid(args, spec):
    grid = harness.logit_grid(args.checkpoint, spec.sigma_values)
    path = harness.write_grid(
        grid, spec.sigma_values, spec.out / f"grid_{Path(args.checkpoint).stem}.csv", spec.emit_plots
    )
    for row in grid:
        print(" ".join(f"{v:8.2f}" for v in row))
    print(f"row/column variance ratio: {harness.variance_ratio(grid):.4f}")
    print(f"grid -> {path}")


def cmd_report(args, spec):
    src = spec.out / "results.csv"
    if not src.exists():
        raise OSError(f"no results at {src}; run 'train' first")
    summary = harness.summarize(fairmetrics.read_csv(src))
    fairmetrics.write_csv(summary, spec.out / "summary.csv")
    text = "\n".join(f"[{r['model']}]\n" + fairmetrics.text_report(r) for r in summary)
    (spec.out / "summary.txt").write_text(text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment spec")
    common.add_argument("--seed", type=int, help="training seed (data seed for 'generate')")
    common.add_argument("--out", type=Path, help=f"output directory (default ${harness.OUT_ENV} or ./results)")
    common.add_argument("--emit-plots", action="store_true", help="also write PNG figures")
    common.add_argument("--no-reuse", action="store_true", help="retrain even if a stored run matches")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="fairci", description="Train and evaluate conditional-independence models on synthetic images."
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/val/test datasets")
    t = sub.add_parser("train", parents=[common], help="train and test model variants")
    t.add_argument("--variant", action="append", choices=sorted(harness.VARIANTS))
    t.add_argument("--lambda", dest="lambda_", type=float, help="lambda for the chosen variants")
    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--split", default="test", choices=synthgen.SPLITS)
    c = sub.add_parser("cv", parents=[common], help="cross-validate lambda for one variant")
    c.add_argument("--variant", required=True, choices=sorted(harness.VARIANTS))
    c.add_argument("--grid", type=float, nargs="+")
    c.add_argument("--k", type=int)
    s = sub.add_parser("sweep", parents=[common], help="lambda x seed sweep")
    s.add_argument("--variant", action="append", choices=sorted(harness.VARIANTS))
    s.add_argument("--lambdas", type=float, nargs="+")
    g = sub.add_parser("grid", parents=[common], help="logit grid over (sigma_A, sigma_B)")
    g.add_argument("--checkpoint", required=True, type=Path)
    sub.add_parser("report", parents=[common], help="summarise results.csv over seeds")
    return p


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "cv": cmd_cv,
    "sweep": cmd_sweep, "grid": cmd_grid, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = _spec(args)
        COMMANDS[args.command](args, spec)
    except OSError as e:
        print(f"fairci: error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"fairci: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
