"""Command-line entry point: ``caseval <command> [flags]``.

Every artifact references a sibling ``<artifact>.manifest.json`` holding the
command, resolved flags, input checksums, version and a timestamp. Keeping the
timestamp out of the artifact itself lets identical runs produce identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, agreement, baselines
from .evaluation import evaluate_models, make_trainer, model_names, rows_to_csv, tq_fold, train_model
from .simulator import SimConfig, simulate_with_truth, write_truth
from .training import TrainConfig, fit
from .types import (
    VARIANT_PRESETS,
    ConfigurationError,
    ModelVariant,
    RatingHistogram,
    SerpItem,
    SessionFormatError,
    read_sessions,
    write_sessions,
)

_BEHAVIOUR_FIELDS = ("clicked", "mouse_fixated")


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(artifact: str | Path, command: str, flags: dict, inputs: Sequence[str | Path]) -> Path:
    path = Path(f"{artifact}.manifest.json")
    manifest = {
        "command": command,
        "flags": flags,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "version": __version__,
        "seed": flags.get("seed"),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path.write_text(_dump(manifest))
    return path


def _load_sessions(path: str):
    sessions = read_sessions(path)
    if not sessions:
        raise ConfigurationError(f"no sessions in {path}")
    return sessions


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    sessions = _load_sessions(args.sessions)
    out = Path(args.out)
    manifest_name = f"{out.name}.manifest.json"
    if args.variant in VARIANT_PRESETS:
        variant = ModelVariant.preset(args.variant, args.reg_lambda)
        config = TrainConfig(variant=variant, max_iterations=args.max_iter, seed=args.seed)
        result = fit(sessions, config)
        model = replace(result.model, name=args.variant)
        fit_info = {k: v for k, v in result.to_dict().items() if k not in ("params", "variant")}
        model.save(out, {"fit": fit_info, "manifest": manifest_name})
        flags = {"variant": args.variant, "lambda": variant.reg_lambda, "max_iter": args.max_iter, "seed": args.seed}
        summary = {"per_term_loglik": result.per_term_loglik, "converged": result.converged,
                   "iterations": result.iterations, "final_objective": result.final_objective}
    else:
        model = train_model(args.variant, sessions, depth=args.depth, calibrate=not args.pin_sat_intercept)
        model.save(out, {"manifest": manifest_name})
        flags = {"variant": args.variant, "depth": args.depth, "seed": args.seed,
                 "pin_sat_intercept": args.pin_sat_intercept}
        summary = {"model": model.to_dict()}
    write_manifest(out, "train", flags, [args.sessions])
    sys.stdout.write(_dump(summary))
    return 0


def _write_report(prefix: str, payload: dict, csv_text: str, command: str, flags: dict, inputs) -> None:
    json_path, csv_path = Path(f"{prefix}.json"), Path(f"{prefix}.csv")
    payload = {**payload, "manifest": f"{json_path.name}.manifest.json"}
    json_path.write_text(_dump(payload))
    csv_path.write_text(csv_text)
    write_manifest(json_path, command, flags, inputs)


def cmd_eval(args) -> int:
    sessions = _load_sessions(args.sessions)
    models = {}
    for path in args.models:
        m = baselines.load_model(path)
        name = m.name
        while name in models:
            name += "'"
        models[name] = m
    if args.ubm_params:
        models["uUBM"] = baselines.load_ubm_params(args.ubm_params)
    report = evaluate_models(models, sessions, conditioned=args.conditioned_eval)
    flags = {"models": list(args.models), "conditioned_eval": args.conditioned_eval, "ubm_params": args.ubm_params}
    _write_report(args.out, report.to_dict(), rows_to_csv(report.csv_rows()), "eval", flags,
                  [args.sessions, *args.models, *([args.ubm_params] if args.ubm_params else [])])
    sys.stdout.write(_dump({k: {"click_loglik": v.click_loglik, "sat_loglik": v.sat_loglik}
                            for k, v in report.models.items()}))
    return 0


def cmd_xval(args) -> int:
    sessions = _load_sessions(args.sessions)
    train = make_trainer(args.models, reg_lambda=args.reg_lambda, depth=args.depth,
                         calibrate=not args.pin_sat_intercept)
    result = tq_fold(
        sessions, args.T, args.Q, args.seed, train,
        lambda models, test: evaluate_models(models, test, conditioned=args.conditioned_eval),
    )
    flags = {"models": list(args.models), "T": args.T, "Q": args.Q, "seed": args.seed,
             "lambda": args.reg_lambda, "depth": args.depth, "conditioned_eval": args.conditioned_eval,
             "pin_sat_intercept": args.pin_sat_intercept}
    _write_report(args.out, result.to_dict(), result.to_csv(), "xval", flags, [args.sessions])
    sys.stdout.write(_dump(result.aggregate()))
    return 0


def cmd_simulate(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.n_sessions is not None:
        raw["n_sessions"] = args.n_sessions
    config = SimConfig.from_dict(raw)
    problems = config.violations()
    if problems:
        raise ConfigurationError("; ".join(problems))
    sessions, truths, norms = simulate_with_truth(config)
    out = Path(args.out)
    write_sessions(out, sessions)
    truth_path = Path(f"{out}.truth.jsonl")
    write_truth(truth_path, truths, norms)
    write_manifest(out, "simulate", {"config": config.to_dict(), "seed": config.seed},
                   [args.config] if args.config else [])
    depth = config.items_per_serp
    clicks = np.array([[it.clicked for it in s.items] for s in sessions], dtype=float)
    summary = {
        "n_sessions": len(sessions),
        "ctr_by_rank": clicks.mean(axis=0)[:depth].round(4).tolist(),
        "satisfaction_rate": float(np.mean([s.satisfaction for s in sessions])),
        "mean_sat_prob": float(np.mean([t.sat_prob for t in truths])),
        "sessions": str(out),
        "truth": str(truth_path),
    }
    sys.stdout.write(_dump(summary))
    return 0


def _read_serp(path: str) -> tuple[list[SerpItem], list[str]]:
    d = json.loads(Path(path).read_text())
    raw = d["items"] if isinstance(d, dict) else d
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError("SERP must be a non-empty list of items or an object with 'items'")
    ignored = sorted({f for it in raw for f in _BEHAVIOUR_FIELDS if f in it})
    items = [SerpItem.from_dict({k: v for k, v in it.items() if k not in _BEHAVIOUR_FIELDS}) for it in raw]
    return items, ignored


def cmd_metric(args) -> int:
    model = baselines.load_model(args.model)
    items, ignored = _read_serp(args.serp)
    if ignored:
        sys.stderr.write(_dump({"notice": f"behavioural fields ignored: {', '.join(ignored)}"}))
    sys.stdout.write(_dump({"model": getattr(model, "name", ""), "utility": float(model.utility(items))}))
    return 0


def _read_allowlist(path: str | None) -> frozenset[str]:
    if not path:
        return frozenset()
    lines = Path(path).read_text().splitlines()
    return frozenset(line.strip() for line in lines if line.strip() and not line.startswith("#"))


def cmd_agreement(args) -> int:
    records = agreement.read_ratings(args.ratings)
    policy = agreement.FilterPolicy(
        min_ratings=args.min_ratings,
        require_quote=not args.no_quote_check,
        disagreement_threshold=args.disagreement_threshold,
        allowlist=_read_allowlist(args.allowlist),
    )
    report, result = agreement.agreement_report(records, policy, args.alpha_metric)
    prefix = args.out
    report_path = Path(f"{prefix}.report.json")
    report_path.write_text(_dump({**report.to_dict(), "manifest": f"{report_path.name}.manifest.json"}))
    Path(f"{prefix}.table.csv").write_text(report.to_csv())
    agreement.write_ratings(f"{prefix}.kept.jsonl", result.kept)
    Path(f"{prefix}.histograms.json").write_text(_dump(agreement.aggregate_histograms(result.kept)))
    flags = {**policy.to_dict(), "alpha_metric": args.alpha_metric}
    inputs = [args.ratings, *([args.allowlist] if args.allowlist else [])]
    write_manifest(report_path, "agreement", flags, inputs)
    sys.stdout.write(_dump({"table": [r.to_dict() for r in report.rows]}))
    return 0


def cmd_attach_ratings(args) -> int:
    """Replace item rating histograms in a session file with aggregated crowd ratings."""
    sessions = read_sessions(args.sessions, validate=False)
    hist = json.loads(Path(args.histograms).read_text())
    matched = 0
    out = []
    for s in sessions:
        items = []
        for it in s.items:
            h = hist.get(it.item_id)
            if h is not None:
                matched += 1
                it = replace(it, d_ratings=RatingHistogram(h["d_ratings"]), r_ratings=RatingHistogram(h["r_ratings"]))
            items.append(it)
        out.append(replace(s, items=tuple(items)))
    write_sessions(args.out, out)
    write_manifest(args.out, "attach-ratings", {}, [args.sessions, args.histograms])
    sys.stdout.write(_dump({"items_updated": matched}))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caseval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a CAS variant or a baseline")
    t.add_argument("--sessions", required=True)
    t.add_argument("--variant", default="CAS", help=f"one of {', '.join(model_names())}")
    t.add_argument("--lambda", dest="reg_lambda", type=float, default=None,
                   help="L2 strength (default: the preset's)")
    t.add_argument("--depth", type=int, default=baselines.DEFAULT_DEPTH)
    t.add_argument("--max-iter", type=int, default=500)
    t.add_argument("--pin-sat-intercept", action="store_true",
                   help="baselines: no satisfaction intercept (plain sigmoid of utility)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score trained models on a session file")
    e.add_argument("--models", nargs="+", required=True)
    e.add_argument("--sessions", required=True)
    e.add_argument("--ubm-params", default=None, help="externally trained UBM parameters")
    e.add_argument("--conditioned-eval", action="store_true",
                   help="condition CAS click probabilities on observed fixations")
    e.add_argument("--out", required=True, help="output prefix for .json and .csv")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("xval", help="TQ-fold cross-validation")
    x.add_argument("--sessions", required=True)
    x.add_argument("--models", nargs="+", default=["CAS", "PBM", "UBM", "random", "DCG"])
    x.add_argument("--T", type=int, default=5)
    x.add_argument("--Q", type=int, default=5)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--lambda", dest="reg_lambda", type=float, default=None)
    x.add_argument("--depth", type=int, default=baselines.DEFAULT_DEPTH)
    x.add_argument("--conditioned-eval", action="store_true")
    x.add_argument("--pin-sat-intercept", action="store_true")
    x.add_argument("--out", required=True, help="output prefix for .json and .csv")
    x.set_defaults(func=cmd_xval)

    s = sub.add_parser("simulate", help="generate synthetic sessions with ground truth")
    s.add_argument("--config", default=None, help="SimConfig JSON (partial allowed)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n-sessions", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("metric", help="score one SERP from ratings and layout")
    m.add_argument("--model", required=True)
    m.add_argument("--serp", required=True)
    m.set_defaults(func=cmd_metric)

    a = sub.add_parser("agreement", help="rater agreement and spammer filtering")
    a.add_argument("--ratings", required=True)
    a.add_argument("--min-ratings", type=int, default=3)
    a.add_argument("--no-quote-check", action="store_true")
    a.add_argument("--disagreement-threshold", type=float, default=None)
    a.add_argument("--allowlist", default=None, help="file of worker ids never removed")
    a.add_argument("--alpha-metric", choices=agreement.ALPHA_METRICS, default="nominal")
    a.add_argument("--out", required=True, help="output prefix")
    a.set_defaults(func=cmd_agreement)

    r = sub.add_parser("attach-ratings", help="fold aggregated histograms into a session file")
    r.add_argument("--sessions", required=True)
    r.add_argument("--histograms", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_attach_ratings)
    return p


def _check(args) -> None:
    names = model_names()
    requested = [args.variant] if args.command == "train" else list(getattr(args, "models", []) or [])
    if args.command in ("train", "xval"):
        for n in requested:
            if n not in names:
                raise ConfigurationError(f"unknown variant {n!r}; valid names: {', '.join(names)}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _check(args)
        return args.func(args)
    except (ConfigurationError, SessionFormatError, OSError, KeyError, ValueError) as e:
        err = {"error": type(e).__name__, "message": str(e) if not isinstance(e, KeyError) else f"missing field {e}"}
        if isinstance(e, SessionFormatError):
            err["line"] = e.line
        sys.stderr.write(json.dumps(err) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
