"""Command-line interface.

Every failure exits nonzero after printing one line ``error: TAG: detail``
to stderr, where the exit code follows the error class: 2 input, 3 numeric
divergence, 4 degenerate data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import InputError, VolaflowError
from .experiment import (
    MethodSpec,
    RunBundle,
    evaluate_bundles,
    file_digest,
    input_provenance,
    run_experiment,
    train_method,
)
from .har import HarParams
from .marketdata import DEFAULT_SPLIT, load_rv_panel, make_series, quotes_to_rv, write_rv_csv
from .synth import SynthConfig, generate_panel, panel_to_rv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: USAGE_ERROR: {message}\n")


def _sidecar_path(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def cmd_rv(args):
    rv = quotes_to_rv(args.input, args.schema)
    out = Path(args.output)
    write_rv_csv(out, rv)
    stdz = {}
    for sym in sorted(rv):
        s = make_series(sym, [rv[sym][d] for d in sorted(rv[sym])])
        stdz[sym] = {"mean": s.raw_mean, "variance": s.raw_variance}
    side = Path(args.sidecar) if args.sidecar else _sidecar_path(out, ".standardization.json")
    side.write_text(json.dumps(stdz, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(rv)} symbols to {out} (standardization in {side})")


def cmd_synth(args):
    kw = {}
    if args.beta is not None:
        kw["har_beta"] = HarParams(*args.beta)
    if args.noise_variance is not None:
        kw["noise_variance"] = args.noise_variance
    cfg = SynthConfig(n_stocks=args.stocks, n_days=args.days, warp=args.warp,
                      warp_lambda=args.lam, seed=args.seed, split=tuple(args.split), **kw)
    sp = generate_panel(cfg)
    out = Path(args.out)
    write_rv_csv(out, panel_to_rv(sp))
    truth = _sidecar_path(out, ".truth.json")
    truth.write_text(json.dumps(sp.truth | {"config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.n_stocks} x {cfg.n_days} synthetic panel to {out} (ground truth in {truth})")


def cmd_train(args):
    rv = Path(args.rv)
    if not rv.is_file():
        raise InputError(f"RV input not found: {rv}")
    panel = load_rv_panel(rv, tuple(args.split))
    spec = {"family": args.family, "residual": args.residual, "iterations": args.iters,
            "eval_every": args.eval_every, "learning_rate": args.lr,
            "stocks_per_batch": args.batch_stocks}
    if args.name:
        spec["name"] = args.name
    if args.k is not None:
        spec["k"] = args.k
    if args.tau is not None:
        spec["tau"] = args.tau
    if args.time_conditioning:
        spec["time_conditioning"] = True
    bundle = train_method(panel, MethodSpec.from_dict(spec), args.seed, input_provenance(rv))
    bundle.save(args.out)
    for msg in bundle.diagnostics:
        print(msg, file=sys.stderr)
    print(f"best snapshot at iteration {bundle.best.iteration}, "
          f"validation log-likelihood {bundle.best.val_loglik:.4f}; wrote {args.out}")


def _evaluate(runs, rv, split, reference, baseline, out):
    bundles = [RunBundle.load(p) for p in runs]
    labels = [b.label for b in bundles]
    if len(set(labels)) != len(labels):
        raise InputError(f"duplicate method labels among runs: {labels}")
    if rv is None:
        paths = {b.provenance.get("input_path") for b in bundles}
        if len(paths) != 1 or None in paths:
            raise InputError("runs do not share one recorded RV input; pass --rv")
        rv = paths.pop()
    rv = Path(rv)
    if not rv.is_file():
        raise InputError(f"RV input not found: {rv}")
    digest = file_digest(rv)
    for b in bundles:
        if b.provenance.get("input_sha256") not in (None, digest):
            raise InputError(f"run {b.label} was trained on different data than {rv}")
    if split is None:
        splits = {tuple(b.config.get("split", DEFAULT_SPLIT)) for b in bundles}
        if len(splits) != 1:
            raise InputError(f"runs disagree on the split: {sorted(splits)}")
        split = splits.pop()
    if reference is not None and reference not in labels:
        raise InputError(f"reference {reference!r} is not among the runs {labels}")
    panel = load_rv_panel(rv, tuple(split))
    path = evaluate_bundles(panel, bundles, out, reference, baseline)
    print(f"wrote report for {len(bundles)} method(s) to {path}")


def cmd_evaluate(args):
    _evaluate(args.runs, args.rv, args.split, args.reference, args.baseline, args.out)


def cmd_run(args):
    path = run_experiment(args.config, args.out)
    print(f"wrote experiment report to {path}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volaflow", description="Co-trained transforms for HAR volatility forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("rv", help="quote CSV to daily realized-volatility CSV")
    s.add_argument("--input", required=True)
    s.add_argument("--schema", choices=("A", "B"), default="A")
    s.add_argument("--output", required=True)
    s.add_argument("--sidecar", help="standardization JSON path (default: next to the output)")
    s.set_defaults(func=cmd_rv)

    s = sub.add_parser("synth", help="generate a synthetic RV panel with known ground truth")
    s.add_argument("--stocks", type=int, default=50)
    s.add_argument("--days", type=int, default=480)
    s.add_argument("--warp", choices=("softplus", "identity", "yj"), default="softplus")
    s.add_argument("--lambda", dest="lam", type=float, default=0.25)
    s.add_argument("--beta", type=float, nargs=4, metavar=("B0", "BD", "BW", "BM"))
    s.add_argument("--noise-variance", type=float)
    s.add_argument("--split", type=int, nargs=3, default=list(DEFAULT_SPLIT))
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="co-train one transform with HAR")
    s.add_argument("--rv", required=True)
    s.add_argument("--family", required=True,
                   choices=("node", "identity", "wallace", "yeo_johnson", "yj", "tanh", "tanh_mix"))
    s.add_argument("--name", help="method label used in reports")
    s.add_argument("--k", type=int, help="number of tanh units")
    s.add_argument("--tau", type=float, help="NODE integration horizon")
    s.add_argument("--time-conditioning", action="store_true")
    s.add_argument("--residual", choices=("gaussian", "student_t"), default="gaussian")
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--eval-every", type=int, default=5)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--batch-stocks", type=int, default=16)
    s.add_argument("--split", type=int, nargs=3, default=list(DEFAULT_SPLIT))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, helptext in (("evaluate", "score trained runs on the test region"),
                           ("report", "write the comparison report for trained runs")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--rv", help="RV CSV (default: the input recorded in the runs)")
        s.add_argument("--runs", nargs="+", required=True)
        s.add_argument("--reference", help="method label the p-values test against")
        s.add_argument("--baseline", default="identity", help="label for improvement correlations")
        s.add_argument("--split", type=int, nargs=3)
        s.add_argument("--out", required=True)
        s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="run a JSON-configured experiment end to end")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="report directory (overrides the config)")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except VolaflowError as exc:
        print(f"error: {exc.tag}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: IO_ERROR: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
