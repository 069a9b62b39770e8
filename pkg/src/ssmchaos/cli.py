"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 acceptance-check failure (``reproduce --check``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RECIPES, SCALES, ConfigError, load, load_recipe, recipe_text
from .manifold import FORMAT_TAG, ModelFormatError, SsmModel, strip_comment_header

log = logging.getLogger("ssmchaos")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4

_STAGE_VERBS = {"generate": "generate", "embed": "embed", "fit-ssm": "fit-ssm",
                "fit-model": "fit-model", "forecast": "forecast", "diagnose": "diagnose"}


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="experiment TOML file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numerical kernels")
    p.add_argument("--scale", choices=SCALES, default="desk", help="desk or full-size data")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmchaos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in _STAGE_VERBS:
        _common(sub.add_parser(verb, help=f"run the pipeline up to the {verb} stage"), True)
    p = sub.add_parser("run", help="run the full pipeline and render figures")
    _common(p, True)
    p = sub.add_parser("reproduce", help="run a bundled experiment recipe")
    p.add_argument("name", choices=RECIPES + ("all",))
    p.add_argument("--check", action="store_true", help="exit with status 4 if any check fails")
    p.add_argument("--show-config", action="store_true", help="print the recipe TOML and exit")
    p.add_argument("--write-data", action="store_true", help="also write full trajectories and kNN models")
    _common(p, False)
    p = sub.add_parser("inspect", help="summarize a model file")
    p.add_argument("model_file")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def set_threads(n: int) -> None:
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    import numba
    from threadpoolctl import threadpool_limits
    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def inspect_text(text: str) -> str:
    """Human-readable summary of an SSM, polynomial-flow or kNN model file."""
    from .dynamics import KnnModel, PolyFlowModel
    lines, _ = strip_comment_header(text)
    head = lines[0] if lines else ""
    out = []
    if head.startswith(FORMAT_TAG):
        m = SsmModel.from_text(text)
        orth, cross = m.constraint_residuals()
        out += ["SSM parametrization", f"  ambient dimension  {m.rho}", f"  manifold dimension {m.d}",
                f"  order              {m.order}", f"  anchor             {m.anchor_mode}",
                f"  |V1'V1 - I|        {orth:.3e}", f"  |V1'Vnl|           {cross:.3e}"]
    elif head.startswith("ssmchaos-polyflow"):
        m = PolyFlowModel.from_text(text)
        out += ["polynomial reduced dynamics", f"  kind      {m.kind}", f"  dimension {m.d}",
                f"  order     {m.order}", f"  rank-deficient fit: {m.rank_deficient}"]
        if m.modal is not None:
            out.append("  linear spectrum (real, imag):")
            out += [f"    {v.real: .10g} {v.imag: .10g}" for v in m.modal.eigenvalues]
    elif head.startswith("ssmchaos-knn"):
        m = KnnModel.from_text(text)
        out += ["kNN reduced dynamics", f"  neighbors {m.k}", f"  dimension {m.d}",
                f"  pairs     {m.X.shape[0]}", f"  step      {m.dt!r}", f"  theiler   {m.theiler}"]
    else:
        raise ModelFormatError(f"line 1: unrecognized model header {head[:40]!r}")
    return "\n".join(out)


def _run_recipe(args, name: str) -> int:
    from .experiments import reproduce
    out = Path(args.out) / name if args.out and args.name == "all" else (args.out or Path("out") / name)
    res = reproduce(name, args.scale, args.seed, out, args.threads, write_large=args.write_data)
    print(res.summary())
    print(f"outputs in {Path(out).resolve()}")
    return EXIT_OK if res.passed or not args.check else EXIT_ACCEPTANCE


def dispatch(args) -> int:
    if args.verb == "inspect":
        print(inspect_text(Path(args.model_file).read_text()))
        return EXIT_OK
    set_threads(args.threads)
    if args.verb == "reproduce":
        if args.show_config:
            if args.name == "all":
                raise ConfigError("--show-config needs a single recipe name")
            print(recipe_text(args.name), end="")
            return EXIT_OK
        if args.config:
            raise ConfigError("reproduce uses the bundled recipe; use 'run --config' for custom files")
        names = RECIPES if args.name == "all" else (args.name,)
        for name in names:
            load_recipe(name, args.scale, args.seed)  # validate before any long run
        codes = [_run_recipe(args, n) for n in names]
        return max(codes)
    from .pipeline import run_pipeline
    cfg = load(args.config, args.scale, args.seed)
    if args.verb == "run":
        from .plotting import render_figures
        ctx = run_pipeline(cfg, args.out, threads=args.threads)
        render_figures(ctx)
        ctx.write_manifest()
    else:
        ctx = run_pipeline(cfg, args.out, until=_STAGE_VERBS[args.verb], threads=args.threads)
    print(f"{args.verb}: {len(ctx.files)} files in {ctx.out.resolve()} (config {ctx.hash})")
    for k, v in sorted(ctx.metrics.items()):
        if k != "horizon_time_per_start":
            print(f"  {k}: {np.round(v, 6).tolist() if isinstance(v, (list, np.ndarray)) else v}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import StageError
    from .systems import IntegrationError
    try:
        return dispatch(args)
    except (ConfigError, ModelFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, ConfigError) else EXIT_NUMERICAL
    except (IntegrationError, FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
