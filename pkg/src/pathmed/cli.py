"""Command-line interface: ``pathmed {validate,fit,simulate,effects,summarize}``.

Exit codes are 0 on success, 2 for input errors and 3 for runtime failures.
Every failure also writes a one-line JSON diagnostic to stderr. Log verbosity
comes from the ``PATHMED_LOG_LEVEL`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .effects import effect_draws, summarize
from .exceptions import InputError, PathmedError, SamplerError
from .io import json_dumps, load_inputs, read_chain, read_config, write_chain, write_csv, write_json
from .model import Hyperparameters, standardize
from .sampler import ChainConfig, run_chain
from .simulation import SCENARIOS, reference_graph, run_study, study_rate_rows, study_table_rows, true_effects

logger = logging.getLogger("pathmed")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
STANDARDIZED_TOL = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _positive_int(v):
    i = int(v)
    if i < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return i


def _nonneg_int(v):
    i = int(v)
    if i < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return i


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _csv_list(v):
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _add_common(p, data=True):
    p.add_argument("--config", type=Path, help="flat key = value file; command-line flags take precedence")
    if data:
        p.add_argument("--data", type=Path, help="dataset CSV: id, exposure, outcome, covariates, metabolites")
        p.add_argument("--pathways", type=Path, help="JSON-lines reaction records")
        p.add_argument("--covariates", type=_csv_list, default=None, help="comma-separated covariate columns")


def _add_chain_options(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (required)")
    p.add_argument("--iters", type=_positive_int, default=2000, help="total MCMC iterations")
    p.add_argument("--burnin", type=_nonneg_int, default=None, help="burn-in iterations (default: half of --iters)")
    p.add_argument("--thin", type=_positive_int, default=1)
    p.add_argument("--fdr-q", type=float, default=0.05, help="screening FDR level for the Ising log-odds")
    p.add_argument("--eta-psi", type=float, default=None, help="fixed exposure-side Ising log-odds")
    p.add_argument("--eta-phi", type=float, default=None, help="fixed outcome-side Ising log-odds")
    p.add_argument("--ising-field", choices=("log-odds", "literal"), default="log-odds")
    p.add_argument("--h", type=float, default=10.0, help="prior variance scale")
    p.add_argument("--a0", type=float, default=0.01)
    p.add_argument("--b0", type=float, default=0.01)
    p.add_argument("--xi", type=float, default=0.0625, help="initial proposal variance for rho")
    p.add_argument("--dmh-sweeps", type=_positive_int, default=1, help="Gibbs sweeps per auxiliary configuration")
    p.add_argument("--no-adapt", action="store_true", help="keep the rho proposal variance fixed")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker processes; never changes results")


def _add_selection(p):
    p.add_argument("--threshold", type=float, default=0.5, help="inclusion probability threshold")
    p.add_argument("--select-fdr", type=float, default=None, help="Bayesian FDR level for pathway selection")
    p.add_argument("--x", type=float, default=1.0, help="exposure level x")
    p.add_argument("--x-star", type=float, default=0.0, help="reference exposure level x*")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathmed", description="Bayesian pathway-guided mediation analysis")
    parser.add_argument("--version", action="version", version=f"pathmed {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("validate", help="check a dataset and pathway file")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None, help="write the report here instead of stdout")

    p = sub.add_parser("fit", help="run the sampler and write a chain archive and summary")
    _add_common(p)
    _add_chain_options(p)
    _add_selection(p)
    p.add_argument("--standardize", action="store_true", help="standardize metabolite columns before fitting")
    p.add_argument("--out-dir", type=Path, default=None, help="output directory")

    p = sub.add_parser("simulate", help="run the simulation study")
    _add_common(p, data=False)
    _add_chain_options(p)
    p.add_argument("--scenario", type=_csv_list, default=None, help="scenario ids (S1..S4) or ALL")
    p.add_argument("--replicates", type=_positive_int, default=20)
    p.add_argument("--misspecify-adjacency", action="store_true", help="fit on a misannotated graph")
    p.add_argument("--fitter", choices=("bayes", "oracle"), default="bayes")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--n-mc", type=_positive_int, default=1_000_000, help="Monte Carlo size for true effects")
    p.add_argument("--out-dir", type=Path, default=None)

    p = sub.add_parser("effects", help="effect summaries for a stored chain")
    _add_common(p, data=False)
    p.add_argument("--chain", type=Path, default=None)
    p.add_argument("--x", type=float, default=1.0)
    p.add_argument("--x-star", type=float, default=0.0)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", type=Path, default=None, help="effects CSV path (a JSON file is written alongside)")

    p = sub.add_parser("summarize", help="posterior summary for a stored chain")
    _add_common(p, data=False)
    p.add_argument("--chain", type=Path, default=None)
    _add_selection(p)
    p.add_argument("--out", type=Path, default=None)
    return parser


# ---------------------------------------------------------------------------
# config merging


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(parser, argv):
    """Parse ``argv``; values from ``--config`` fill in flags not given explicitly."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    sp = _subparser(parser, args.command)
    by_dest = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in read_config(args.config).items():
        a = by_dest.get(key)
        if a is None or key in ("config", "help"):
            raise InputError(f"{args.config}: unknown option {key!r} for {args.command}")
        try:
            if isinstance(a, argparse._StoreTrueAction):
                defaults[key] = _bool(raw)
            else:
                v = a.type(raw) if a.type else raw
                if a.choices is not None and v not in a.choices:
                    raise argparse.ArgumentTypeError(f"invalid choice {v!r}")
                defaults[key] = v
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise InputError(f"{args.config}: bad value for {key}: {exc}") from None
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise InputError(f"missing required option(s): {', '.join(missing)}")
    for n in names:
        v = getattr(args, n)
        if isinstance(v, Path) and n not in ("out", "out_dir") and not v.exists():
            raise InputError(f"--{n.replace('_', '-')}: path does not exist: {v}")


def _chain_config(args) -> ChainConfig:
    burnin = args.iters // 2 if args.burnin is None else args.burnin
    if burnin >= args.iters:
        raise InputError("--burnin must be smaller than --iters")
    hyper = Hyperparameters(
        h=args.h,
        a0=args.a0,
        b0=args.b0,
        eta_psi_1=args.eta_psi,
        eta_phi_1=args.eta_phi,
        xi=args.xi,
        seed=args.seed,
        ising_field=args.ising_field,
        dmh_sweeps=args.dmh_sweeps,
    )
    return ChainConfig(
        n_iter=args.iters,
        n_burnin=burnin,
        thin=args.thin,
        hyper=hyper,
        adapt_xi=not args.no_adapt,
        fdr_q=args.fdr_q,
    )


# ---------------------------------------------------------------------------
# commands


def _standardization_status(M) -> dict:
    mean = M.mean(axis=0)
    sd = M.std(axis=0, ddof=1) if M.shape[0] > 1 else np.zeros(M.shape[1])
    return {
        "standardized": bool(np.all(np.abs(mean) < STANDARDIZED_TOL) and np.all(np.abs(sd - 1) < STANDARDIZED_TOL)),
        "max_abs_mean": float(np.abs(mean).max()),
        "max_abs_sd_minus_1": float(np.abs(sd - 1).max()),
    }


def cmd_validate(args) -> int:
    _require(args, "data", "pathways")
    table, graph, unmapped = load_inputs(args.data, args.pathways, args.covariates)
    issues, warn = [], []
    n, K = table.metabolites.shape
    q = table.covariates.shape[1] + 1
    if n < q + 3:
        issues.append(f"too few samples: {n} (need at least {q + 3})")
    sd = table.metabolites.std(axis=0)
    const = [m for m, s in zip(table.metabolite_names, sd) if s == 0]
    if const:
        issues.append(f"constant metabolite columns: {const}")
    if unmapped:
        warn.append(f"metabolites in no pathway: {unmapped}")
    std = _standardization_status(table.metabolites)
    if not std["standardized"]:
        warn.append("metabolite columns are not standardized; use fit --standardize")
    sizes = np.array([len(graph.membership[p]) for p in graph.pathway_ids])
    report = {
        "issues": issues,
        "warnings": warn,
        "n_samples": n,
        "n_metabolites": K,
        "n_covariates": q - 1,
        "covariates": list(table.covariate_names),
        "n_pathways": graph.L,
        "graph": {
            "n_edges_raw": int(np.count_nonzero(graph.raw_counts)),
            "n_edges": int(np.count_nonzero(graph.A)),
            "removed_edges": len(graph.removed_edges),
            "removed": [[graph.metabolites[i], graph.metabolites[j], int(w)] for i, j, w in graph.removed_edges],
            "nilpotency_index": int(graph.D),
        },
        "coverage": {
            "metabolites_in_pathways": K - len(unmapped),
            "unmapped": unmapped,
            "pathway_size_min": int(sizes.min()),
            "pathway_size_median": float(np.median(sizes)),
            "pathway_size_max": int(sizes.max()),
        },
        "standardization": std,
    }
    text = json_dumps(report)
    if args.out is None:
        sys.stdout.write(text)
    else:
        write_json(args.out, report)
    return EXIT_OK


def cmd_fit(args) -> int:
    _require(args, "data", "pathways", "seed", "out_dir")
    table, graph, unmapped = load_inputs(args.data, args.pathways, args.covariates)
    if unmapped:
        logger.warning("metabolites in no pathway: %s", unmapped)
    meta = {"data": str(args.data), "pathways": str(args.pathways), "covariates": list(table.covariate_names)}
    M = table.metabolites
    if args.standardize:
        M, mean, sd = standardize(M)
        meta["standardization"] = {"mean": mean, "sd": sd}
    elif not _standardization_status(M)["standardized"]:
        logger.warning("metabolite columns are not standardized; consider --standardize")
    dataset = table.dataset(M)
    config = _chain_config(args)
    chain = run_chain(dataset, graph, config)
    summ = summarize(chain, x=args.x, x_star=args.x_star, threshold=args.threshold, fdr_q=args.select_fdr)
    write_chain(args.out_dir / "chain", chain, meta)
    write_json(args.out_dir / "summary.json", _summary_doc(chain, summ))
    return EXIT_OK


def _summary_doc(chain, summ) -> dict:
    doc = summ.to_dict()
    doc["sampler"] = {
        "n_iter": chain.n_iter,
        "n_burnin": chain.n_burnin,
        "thin": chain.thin,
        "hyperparameters": chain.hyper.to_dict(),
        "acceptance": chain.acceptance_rates(),
        "n_degenerate_scores": chain.n_degenerate,
    }
    return doc


def _load_chain(args):
    _require(args, "chain")
    chain, meta = read_chain(args.chain)
    if chain.n_samples == 0:
        raise InputError(f"{args.chain}: chain has no kept draws")
    return chain, meta


def cmd_summarize(args) -> int:
    chain, _ = _load_chain(args)
    summ = summarize(chain, x=args.x, x_star=args.x_star, threshold=args.threshold, fdr_q=args.select_fdr)
    doc = _summary_doc(chain, summ)
    if args.out is None:
        sys.stdout.write(json_dumps(doc))
    else:
        write_json(args.out, doc)
    return EXIT_OK


def effect_rows(chain, x=1.0, x_star=0.0, level=0.95) -> list[dict]:
    """One row per effect: overall NDE/NIE/TE, then each pathway's indirect effect."""
    d = effect_draws(chain, x=x, x_star=x_star)
    a = (1 - level) / 2
    rows = []

    def row(effect, pathway, v):
        lo, hi = np.quantile(v, [a, 1 - a])
        rows.append({"effect": effect, "pathway": pathway, "mean": float(v.mean()), "lower": float(lo), "upper": float(hi)})

    for name in ("NDE", "NIE", "TE"):
        row(name, "", getattr(d, name))
    for l, pid in enumerate(chain.pathway_ids):
        row("NIE_pathway", pid, d.NIE_Pa[:, l])
    return rows


def cmd_effects(args) -> int:
    chain, _ = _load_chain(args)
    if not 0 < args.level < 1:
        raise InputError("--level must be in (0, 1)")
    rows = effect_rows(chain, args.x, args.x_star, args.level)
    cols = ["effect", "pathway", "mean", "lower", "upper"]
    doc = {"contrast": {"x": args.x, "x_star": args.x_star}, "level": args.level, "effects": rows}
    if args.out is None:
        sys.stdout.write(json_dumps(doc))
    else:
        write_csv(args.out, rows, cols)
        write_json(args.out.with_suffix(".json"), doc)
    return EXIT_OK


def cmd_simulate(args) -> int:
    _require(args, "seed", "out_dir")
    ids = args.scenario or ["S2"]
    if [s.upper() for s in ids] == ["ALL"]:
        ids = list(SCENARIOS)
    unknown = [s for s in ids if s not in SCENARIOS]
    if unknown:
        raise InputError(f"unknown scenario id(s) {unknown}; choose from {sorted(SCENARIOS)}")
    config = _chain_config(args)
    graph = reference_graph()
    table, rates, studies = [], [], []
    for sid in ids:
        spec = SCENARIOS[sid]
        truth = true_effects(spec, graph, n_mc=args.n_mc, seed=args.seed)
        m = run_study(
            spec,
            args.replicates,
            config,
            misannotation=args.misspecify_adjacency,
            graph=graph,
            seed=args.seed,
            threshold=args.threshold,
            fitter=args.fitter,
            n_jobs=args.threads,
            truth=truth,
        )
        table.extend(study_table_rows(m))
        rates.extend(study_rate_rows(m))
        doc = m.to_dict()
        doc["truth_se"] = truth.se
        studies.append(doc)
    out = args.out_dir
    write_csv(out / "effects_table.csv", table)
    write_csv(out / "selection_rates.csv", rates)
    write_json(
        out / "study.json",
        {
            "scenarios": ids,
            "misannotation": bool(args.misspecify_adjacency),
            "replicates": args.replicates,
            "seed": args.seed,
            "fitter": args.fitter,
            "studies": studies,
        },
    )
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "effects": cmd_effects,
    "summarize": cmd_summarize,
}


def _diagnostic(kind: str, exc: BaseException, **extra) -> None:
    doc = {"error": kind, "type": type(exc).__name__, "message": str(exc), **extra}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


def _setup_logging():
    level = os.environ.get("PATHMED_LOG_LEVEL", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        # BLAS stays single-threaded so results cannot depend on --threads
        with threadpool_limits(limits=1), warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except InputError as exc:
        _diagnostic("input", exc)
        return EXIT_INPUT
    except SamplerError as exc:
        _diagnostic("runtime", exc, iteration=exc.iteration, step=exc.step)
        return EXIT_RUNTIME
    except (PathmedError, ArithmeticError) as exc:
        _diagnostic("runtime", exc)
        return EXIT_RUNTIME
    except OSError as exc:
        _diagnostic("input" if isinstance(exc, FileNotFoundError) else "runtime", exc)
        return EXIT_INPUT if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("unhandled error", exc_info=True)
        _diagnostic("runtime", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
