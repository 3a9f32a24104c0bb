import argparse
import json
import sys
from typing import Any, Dict, List, Optional

from app.config import build_run_config
from app.errors import ConvergenceError, FadingError, ParseError
from app.pipeline import FadingPipeline


def pretty_print(payload: Dict[str, Any]) -> None:
    print("\n[result]")
    print(json.dumps(payload, indent=2))


def print_error(exc: FadingError) -> None:
    print(f"\n[error] {exc}", file=sys.stderr)
    if isinstance(exc, ParseError) and exc.row is not None:
        print(f"        at data row {exc.row}, column {exc.column!r}", file=sys.stderr)
    if isinstance(exc, ConvergenceError) and exc.failing:
        print(f"        failing: {', '.join(exc.failing[:10])}", file=sys.stderr)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--out", help="Output directory (cv: report JSON file)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--force", action="store_true", default=None, help="Overwrite outputs and accept Rhat failures")
    parser.add_argument("--log", default="logs/trace.jsonl", help="JSONL trace file")


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", help="Dataset CSV (id,Sx,Sy,H,S,I,y1..yT)")
    parser.add_argument("--knots", type=int)
    parser.add_argument("--no-derivatives", action="store_true", help="Drop the monotonicity and saturation terms")
    parser.add_argument("--chains", type=int)
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--samples", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Spatially correlated, shape-constrained colour fading models.")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Sample the posterior and write draws and diagnostics")
    _common(fit)
    _model_flags(fit)

    predict = sub.add_parser("predict", help="Predictive fading curve at one location")
    _common(predict)
    predict.add_argument("--run", help="Directory written by fit")
    target = predict.add_mutually_exclusive_group(required=True)
    target.add_argument("--location", help="Id of an observed location")
    target.add_argument("--inputs", type=float, nargs=5, metavar=("H", "S", "I", "SX", "SY"), help="Raw inputs of a new location")

    fmap = sub.add_parser("map", help="Posterior mean fading map over a pixel grid")
    _common(fmap)
    fmap.add_argument("--run", help="Directory written by fit")
    fmap.add_argument("--grid", help="Pixel grid CSV (px,py,H,S,I)")
    fmap.add_argument("--times", type=float, nargs="+", help="Time points to emit (default: all)")
    fmap.add_argument("--variance", action="store_true", default=None, help="Also emit predictive variance")

    cv = sub.add_parser("cv", help="Exact-refit cross-validation")
    _common(cv)
    _model_flags(cv)
    cv.add_argument("--scheme", choices=["cv1", "cv2"], default="cv1")
    cv.add_argument("--compare", action="store_true", help="Run with and without derivative constraints")
    cv.add_argument("--max-folds", type=int, help="Only run the first N folds")

    simulate = sub.add_parser("simulate", help="Write a synthetic dataset, truth record and pixel grid")
    _common(simulate)
    simulate.add_argument("--knots", type=int)
    simulate.add_argument("--locations", type=int, default=13)
    simulate.add_argument("--n-times", type=int, default=11)

    basis = sub.add_parser("basis", help="Dump the spline basis matrices")
    _common(basis)
    basis.add_argument("--data", help="Take the time grid from this dataset")
    basis.add_argument("--knots", type=int)
    basis.add_argument("--n-times", type=int, help="Time grid 1..T when no dataset is given")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    def get(name: str) -> Any:
        return getattr(args, name, None)

    model: Dict[str, Any] = {"knots": get("knots")}
    if get("no_derivatives"):
        model.update(monotonicity=False, saturation=False)
    return {
        "paths": {"data": get("data"), "grid": get("grid"), "out": get("out"), "run": get("run")},
        "model": model,
        "sampler": {
            "seed": get("seed"),
            "chains": get("chains"),
            "warmup": get("warmup"),
            "samples": get("samples"),
            "threads": get("threads"),
        },
        "predict": {"variance_map": get("variance")},
        "force": get("force"),
    }


def run(args: argparse.Namespace) -> Dict[str, Any]:
    config = build_run_config(args.config, overrides_from_args(args))
    pipeline = FadingPipeline(config, log_path=args.log)
    if args.command == "fit":
        return pipeline.fit()
    if args.command == "predict":
        return pipeline.predict(location=args.location, inputs=args.inputs)
    if args.command == "map":
        return pipeline.map(times=args.times)
    if args.command == "cv":
        return pipeline.cv(scheme=args.scheme, compare=args.compare, max_folds=args.max_folds)
    if args.command == "simulate":
        return pipeline.simulate(seed=config.sampler.seed, n_locations=args.locations, n_times=args.n_times)
    return pipeline.basis(n_times=args.n_times)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except FadingError as exc:
        print_error(exc)
        return exc.exit_code
    pretty_print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
