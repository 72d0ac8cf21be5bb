"""Command-line front end: ``ttshs {check, moments, simulate, sweep, gene}``.

Exit codes: 0 success / stable, 1 parse, validation or numerical error,
2 unstable, 3 marginal.  Machine-readable output (``--out``) uses 17
significant digits; the summary printed to stdout uses 6.  Every run writes a
manifest to ``--manifest``, else next to ``--out`` as ``<out>.manifest.json``,
else to stderr.
"""

import argparse
import json
import sys

import numpy as np

from . import __version__
from .errors import NoClosedFormError, TtshsError, UnstableModelError
from .io import HUMAN_DIGITS, RunManifest, csv_text, dumps, file_hash, flatten, fmt, load_model, model_to_dict, write_text
from .timing import EventTimeDistribution

EXIT_OK, EXIT_ERROR, EXIT_UNSTABLE, EXIT_MARGINAL = 0, 1, 2, 3
VERIFY_RTOL = 1e-6


class _Usage(Exception):
    pass


# -- helpers ---------------------------------------------------------------------
def _load(args, manifest):
    manifest.model_file_hash = file_hash(args.model)
    model, dist, _ = load_model(args.model)
    if args.dist is not None:
        try:
            spec = json.loads(args.dist)
        except json.JSONDecodeError as exc:
            raise _Usage(f"--dist is not valid JSON: {exc.msg}") from None
        dist = EventTimeDistribution.from_spec(spec)
    if dist is None:
        raise _Usage("no inter-event distribution: add a 'distribution' key to the model file or pass --dist")
    manifest.distribution = dist.to_spec() if dist.family != "empirical" else {"family": "empirical",
                                                                               "n": int(dist.samples.size)}
    return model, dist


def _emit(args, manifest, doc, summary, csv_doc=None):
    """Write the machine document to --out (or stdout with --format), the summary to stdout."""
    fmt_ = args.format
    if fmt_ == "csv":
        text = csv_doc if csv_doc is not None else csv_text(["key", "value"], flatten(doc))
    else:
        text = dumps(doc) + "\n"
    if args.out:
        write_text(args.out, text)
        manifest.outputs.append(args.out)
        sys.stdout.write(summary)
    elif args.explicit_format:
        sys.stdout.write(text)
    else:
        sys.stdout.write(summary)


def _h(x):
    return fmt(x, HUMAN_DIGITS)


def _h_arr(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _h(a)
    return "[" + ", ".join(_h_arr(v) for v in a) + "]"


def _verdict_exit(v):
    states = (v.mean_stable, v.second_stable)
    if "no" in states:
        return EXIT_UNSTABLE
    if "marginal" in states:
        return EXIT_MARGINAL
    return EXIT_OK


def _verdict_lines(v):
    return (f"mean_stable: {v.mean_stable}\n"
            f"second_stable: {v.second_stable}\n"
            f"mean_spectral_radius: {_h(v.mean_spectral_radius)}\n"
            f"second_spectral_radius: {_h(v.second_spectral_radius)}\n"
            f"mgf_finite: {str(v.mgf_finite).lower()}\n"
            f"sufficiency_shortcut_used: {str(v.sufficiency_shortcut_used).lower()}\n")


# -- commands --------------------------------------------------------------------
def cmd_check(args, manifest):
    from .lti import check_stability
    from .ltv import check_stability_ltv
    from .model import check_remark1_sufficiency, require_valid

    model, dist = _load(args, manifest)
    require_valid(model, dist)
    if model.mode == "LTV":
        verdict = check_stability_ltv(model, dist)
    else:
        verdict = check_stability(model, dist, method=args.method)
    r1 = check_remark1_sufficiency(model, dist)
    doc = {"verdict": verdict.to_dict(),
           "sufficiency": {"applies": r1.applies, "mean_applies": r1.mean_applies,
                           "second_applies": r1.second_applies, "reason": r1.reason, "notes": list(r1.notes)}}
    summary = _verdict_lines(verdict) + f"sufficient_condition: {'applies' if r1.applies else 'does not apply'}"
    summary += f" ({r1.reason})\n" if r1.reason else "\n"
    _emit(args, manifest, doc, summary)
    return _verdict_exit(verdict)


def _discrepancy(a, b):
    worst = 0.0
    for key in ("mean", "second_moment"):
        x, y = getattr(a, key), getattr(b, key)
        if x is None or y is None:
            continue
        scale = max(float(np.max(np.abs(y))), np.finfo(float).tiny)
        worst = max(worst, float(np.max(np.abs(x - y))) / scale)
    return worst


def cmd_moments(args, manifest):
    from .lti import steady_moments
    from .model import require_valid

    model, dist = _load(args, manifest)
    require_valid(model, dist)
    rep = steady_moments(model, dist, args.method, args.force, order=args.order)
    doc = rep.to_dict()
    if args.verify:
        other_method = "general" if args.method != "general" else "closed"
        try:
            other = steady_moments(model, dist, other_method, True, order=args.order)
        except NoClosedFormError as exc:
            doc["verify"] = {"status": "skipped", "reason": str(exc)}
        else:
            if other.method_path == rep.method_path:
                doc["verify"] = {"status": "skipped", "reason": f"only the {rep.method_path} path applies"}
            else:
                d = _discrepancy(rep, other)
                doc["verify"] = {"against": other.method_path, "relative_discrepancy": d,
                                 "status": "ok" if d <= VERIFY_RTOL else "failed"}
    summary = f"method_path: {rep.method_path}\nmean: {_h_arr(rep.mean)}\n"
    if rep.covariance is not None:
        summary += f"covariance: {_h_arr(rep.covariance)}\ncv_squared: {_h_arr(rep.cv_squared)}\n"
    summary += f"mean_stable: {rep.verdict.mean_stable}, second_stable: {rep.verdict.second_stable}\n"
    for w in rep.warnings:
        summary += f"warning: {w}\n"
    if "verify" in doc:
        v = doc["verify"]
        summary += f"verify: {v['status']}"
        summary += f" (relative discrepancy {_h(v['relative_discrepancy'])})\n" if "relative_discrepancy" in v else "\n"
    _emit(args, manifest, doc, summary)
    if doc.get("verify", {}).get("status") == "failed":
        sys.stderr.write(f"error [verify_failed]: closed and general paths differ by "
                         f"{_h(doc['verify']['relative_discrepancy'])} relative (limit {_h(VERIFY_RTOL)})\n")
        return EXIT_ERROR
    return EXIT_OK


def cmd_simulate(args, manifest):
    from .model import require_valid
    from .simulate import SimConfig, simulate

    model, dist = _load(args, manifest)
    require_valid(model, dist)
    config = SimConfig(args.trajectories, args.events, args.burn_in, args.estimator, args.seed, args.ltv_tol)
    manifest.config = {"n_trajectories": config.n_trajectories, "n_events_per_trajectory": config.n_events_per_trajectory,
                       "burn_in_events": config.burn_in_events, "estimator": config.estimator,
                       "master_seed": config.master_seed, "ltv_flow_tolerance": config.ltv_flow_tolerance}
    est = simulate(model, dist, config, dump_path=args.dump)
    if args.dump:
        manifest.outputs.append(args.dump)
    doc = est.to_dict()
    summary = (f"mean_hat: {_h_arr(est.mean_hat)} +- {_h_arr(est.std_err_mean)}\n"
               f"covariance_hat: {_h_arr(est.covariance_hat)} +- {_h_arr(est.std_err_covariance)}\n"
               f"n_effective: {est.n_effective}\n")
    if est.n_aborted:
        sys.stderr.write(f"warning [nonfinite_state]: trajectories {est.aborted_trajectories[:20]} aborted\n")
    if est.nonstationary:
        summary += "warning: estimate flagged nonstationary\n"
    if est.clip_count:
        summary += f"warning: negative covariance clipped {est.clip_count} times\n"
    if args.compare:
        from .lti import steady_moments

        try:
            rep = steady_moments(model, dist, "auto", False, order=2)
        except UnstableModelError as exc:
            doc["compare"] = {"status": "unavailable", "reason": str(exc)}
            summary += f"compare: unavailable ({exc})\n"
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                z_mean = (est.mean_hat - rep.mean) / est.std_err_mean
                z_cov = (est.covariance_hat - rep.covariance) / est.std_err_covariance
            max_z = float(np.nanmax(np.abs(np.concatenate([z_mean.ravel(), z_cov.ravel()]))))
            doc["compare"] = {"analytic_mean": rep.mean, "analytic_covariance": rep.covariance,
                              "z_mean": z_mean, "z_covariance": z_cov, "max_abs_z": max_z}
            summary += f"z_mean: {_h_arr(z_mean)}\nz_covariance: {_h_arr(z_cov)}\nmax |z|: {_h(max_z)}\n"
    _emit(args, manifest, doc, summary)
    return EXIT_OK


def cmd_sweep(args, manifest):
    from .gene import SWEEP_COLUMNS, sweep

    manifest.model_file_hash = file_hash(args.spec)
    with open(args.spec) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise _Usage(f"sweep spec is not valid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from None
    manifest.config = spec
    rows = sweep(spec)
    table = csv_text(SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in rows])
    doc = {"columns": list(SWEEP_COLUMNS), "rows": rows}
    summary = f"{len(rows)} rows\n"
    if not args.explicit_format:
        # the grid itself goes to stdout when there is no --out
        args.format = "csv"
        args.explicit_format = True
    _emit(args, manifest, doc, summary, csv_doc=table)
    return EXIT_OK


def _gene_dist(args):
    if args.dist is not None:
        try:
            return EventTimeDistribution.from_spec(json.loads(args.dist))
        except json.JSONDecodeError as exc:
            raise _Usage(f"--dist is not valid JSON: {exc.msg}") from None
    if args.cycle_mean is None:
        raise _Usage("gene needs --dist or --cycle-mean")
    if args.family == "exponential":
        return EventTimeDistribution.exponential(args.cycle_mean)
    if args.family == "deterministic":
        return EventTimeDistribution.deterministic(args.cycle_mean)
    return EventTimeDistribution.gamma_from_mean_cv2(args.cycle_mean, args.cycle_cv2)


def cmd_gene(args, manifest):
    from .gene import GeneModel, gene_mean, gene_mean_ltv, infer_partitioning, noise

    dist = _gene_dist(args)
    manifest.distribution = dist.to_spec()
    k_x = args.k_x
    if args.fix_mean is not None:
        from .errors import ConstraintUnsatisfiableError

        unit = GeneModel(1.0, args.gamma_x, args.b, dist, args.profile)
        base = gene_mean_ltv(unit) if unit.timer_dependent else gene_mean(unit)
        if not (args.fix_mean > 0 and base > 0):
            raise ConstraintUnsatisfiableError("mean level must be positive to fix it by rescaling k_x")
        k_x = args.fix_mean / base
    if k_x is None:
        raise _Usage("gene needs --k-x or --fix-mean")
    gm = GeneModel(k_x, args.gamma_x, args.b, dist, args.profile)
    manifest.config = {"k_x": k_x, "gamma_x": args.gamma_x, "b": args.b, "rate_profile": args.profile,
                       "regime": args.regime}
    res = noise(gm, args.regime)
    doc = {"k_x": k_x, **res.to_dict()}
    summary = (f"k_x: {_h(k_x)}\nmean: {_h(res.mean)}\ncv2_cell_cycle: {_h(res.cv2_cell_cycle)}\n"
               f"cv2_partitioning: {_h(res.cv2_partitioning)}\ntotal: {_h(res.total)}\nregime: {res.regime}\n")
    if args.infer is not None:
        est = infer_partitioning(args.infer, gm, args.regime)
        doc["inference"] = {"measured_total": args.infer, "b_hat": est.b_hat, "feasible": est.feasible}
        summary += f"b_hat: {_h(est.b_hat)}" + ("" if est.feasible else " (infeasible: measured total below cell-cycle noise)") + "\n"
    if args.write_model:
        write_text(args.write_model, dumps(model_to_dict(gm.to_ttshs(args.kernel), dist)) + "\n")
        manifest.outputs.append(args.write_model)
    _emit(args, manifest, doc, summary)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------
def _common(p, model=True):
    if model:
        p.add_argument("--model", required=True, help="model file (JSON)")
        p.add_argument("--dist", help="inter-event law as JSON, overrides the model file")
    p.add_argument("--out", help="write the machine-readable result here")
    p.add_argument("--format", choices=("json", "csv"), help="output format (default json; csv for sweep)")
    p.add_argument("--manifest", help="run manifest path (default <out>.manifest.json, else stderr)")


def build_parser():
    parser = argparse.ArgumentParser(prog="ttshs", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="stability verdict")
    _common(p)
    p.add_argument("--method", choices=("auto", "general", "closed"), default="auto")

    p = sub.add_parser("moments", help="stationary moments")
    _common(p)
    p.add_argument("--method", choices=("auto", "general", "closed"), default="auto")
    p.add_argument("--verify", action="store_true", help="cross-check against the other evaluation path")
    p.add_argument("--force", action="store_true", help="compute even when the recursion is not stable")
    p.add_argument("--order", type=int, choices=(1, 2), default=2)

    p = sub.add_parser("simulate", help="Monte Carlo estimate")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectories", type=int, default=1000)
    p.add_argument("--events", type=int, default=200)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--estimator", choices=("time_average", "timer_stationary_sampling"), default="time_average")
    p.add_argument("--ltv-tol", type=float, default=1e-10)
    p.add_argument("--compare", action="store_true", help="z-scores against the analytic engine")
    p.add_argument("--dump", help="trajectory CSV")

    p = sub.add_parser("sweep", help="gene noise over a parameter grid")
    _common(p, model=False)
    p.add_argument("--spec", required=True, help="sweep spec (JSON)")

    p = sub.add_parser("gene", help="gene-expression noise decomposition")
    _common(p, model=False)
    p.add_argument("--k-x", type=float)
    p.add_argument("--fix-mean", type=float, help="rescale k_x to this mean level")
    p.add_argument("--gamma-x", type=float, default=0.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--dist", help="cell-cycle law as JSON")
    p.add_argument("--family", choices=("gamma", "exponential", "deterministic"), default="gamma")
    p.add_argument("--cycle-mean", type=float)
    p.add_argument("--cycle-cv2", type=float, default=0.0)
    p.add_argument("--profile", choices=("constant", "exponential", "linear"), default="constant")
    p.add_argument("--regime", choices=("auto", "general", "stable_limit", "fast_decay_asymptote"), default="auto")
    p.add_argument("--infer", type=float, metavar="TOTAL", help="infer b from a measured total CV^2")
    p.add_argument("--kernel", choices=("gaussian_matched", "binomial_partition", "deterministic"),
                   default="gaussian_matched", help="reset kernel for --write-model")
    p.add_argument("--write-model", help="write the equivalent model file")
    return parser


COMMANDS = {"check": cmd_check, "moments": cmd_moments, "simulate": cmd_simulate, "sweep": cmd_sweep,
            "gene": cmd_gene}


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.explicit_format = args.format is not None
    if args.format is None:
        args.format = "json"
    manifest = RunManifest(command=" ".join(["ttshs"] + list(sys.argv[1:] if argv is None else argv)),
                           tool_version=__version__)
    try:
        code = COMMANDS[args.command](args, manifest)
    except UnstableModelError as exc:
        v = exc.verdict
        marginal = v is not None and "marginal" in (v.mean_stable, v.second_stable) and "no" not in (
            v.mean_stable, v.second_stable)
        sys.stderr.write(f"error [{exc.code}]: {exc} (use --force to compute anyway)\n")
        code = EXIT_MARGINAL if marginal else EXIT_UNSTABLE
    except TtshsError as exc:
        sys.stderr.write(f"error [{exc.code}]: {exc}\n")
        code = EXIT_ERROR
    except _Usage as exc:
        sys.stderr.write(f"error [usage]: {exc}\n")
        code = EXIT_ERROR
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = EXIT_ERROR
    manifest.finish()
    path = args.manifest or (f"{args.out}.manifest.json" if args.out else None)
    manifest.write(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
