"""Command line entry point: ``mnar-debias <subcommand> --config cfg.json --seed N``.

Every subcommand reads one JSON config document (all keys optional) and
writes plain CSV/JSON files, so steps can be chained by hand:

    gen -> fit-propensity -> complete -> evaluate / audit

or run end to end with ``experiment``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import audit as audit_mod
from ..completion import CompletionConfig, complete
from ..core import (
    LossKind,
    ObservedMatrix,
    full_loss,
    ips_loss,
    load_array,
    load_matrix,
    observed_loss,
    save_array,
    snips_loss,
    write_dense_csv,
    write_triplets,
)
from ..propensity import (
    OneBitConfig,
    fit_1bitmc,
    fit_1bitmc_modified,
    fit_logistic_regression,
    fit_naive_bayes,
    select_tau,
)
from ..synthetic import sample_mar_ratings, sample_observations
from .experiment import ExperimentConfig, make_truth, run_experiment
from .report import FORMATS, emit_report, markdown_table

log = logging.getLogger("mnar_debias")


def _load_config(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain))


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def cmd_gen(args, cfg: Dict) -> int:
    ds = dict(cfg.get("dataset", cfg))
    ds.setdefault("kind", "user_item")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    ds.setdefault("truth_seed", seed)
    truth = make_truth(ds)
    clip = tuple(ds.get("clip", (1.0, 5.0)))
    sample = sample_observations(truth, ds.get("noise_sd", 1.0), clip, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_array(out / "S.csv", truth.S)
    save_array(out / "P.csv", truth.P)
    save_array(out / "X_star.csv", sample.X_star)
    write_triplets(out / "observed.csv", sample.X)
    save_array(out / "mask.csv", sample.M.data)
    frac = ds.get("mar_fraction", 0.05)
    save_array(out / "mar.csv", sample_mar_ratings(sample.X_star, frac, seed)[None, :])
    man = truth.manifest()
    man.update({"sample_seed": seed, "noise_sd": ds.get("noise_sd", 1.0), "clip": list(clip), "mar_fraction": frac})
    _dump(man, out / "manifest.json")
    print(out)
    return 0


def _features(path):
    return None if path is None else load_array(path)


def cmd_fit_propensity(args, cfg: Dict) -> int:
    pc = dict(cfg.get("propensity", cfg))
    method = args.method or pc.get("method", "1bitmc")
    x = load_matrix(args.observed)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record: Dict = {"method": method}
    if method in ("1bitmc", "1bitmc-modified"):
        gamma = pc.get("gamma", 4.0)
        tau = pc.get("tau")
        if tau is None:
            tau, scores = select_tau(x.mask(), pc.get("tau_grid", (0.5, 1, 2, 4, 8)), gamma, pc.get("cv_folds", 5), seed)
            record["tau_cv"] = {str(k): v for k, v in scores.items()}
        ob = OneBitConfig(tau=tau, gamma=gamma, phi=pc.get("phi", 0.0 if method == "1bitmc-modified" else None), seed=seed)
        fit = fit_1bitmc(x.mask(), ob) if method == "1bitmc" else fit_1bitmc_modified(x.mask(), ob)
        p = fit.P_hat.data
        record.update(fit.to_record())
    elif method == "naive-bayes":
        if args.mar is None:
            raise SystemExit("naive-bayes needs --mar (a missing-at-random rating sample)")
        fit = fit_naive_bayes(x, load_array(args.mar).ravel())
        p = fit.P_hat
        record["value_map"] = {str(k): v for k, v in fit.value_map.items()}
    elif method.startswith("logistic"):
        if args.user_features is None and args.item_features is None:
            raise SystemExit("logistic needs --user-features and/or --item-features")
        mode = {"logistic": "both", "logistic-U": "U", "logistic-I": "I"}[method]
        fit = fit_logistic_regression(x.mask(), _features(args.user_features), _features(args.item_features),
                                      mode, pc.get("l2", 1e-4))
        p = fit.P_hat.data
        record.update({"intercept": fit.intercept, "degenerate": fit.degenerate})
    else:
        raise SystemExit(f"unknown propensity method {method!r}")
    save_array(out / "P_hat.csv", p)
    _dump(record, out / "fit.json")
    print(out / "P_hat.csv")
    return 0


def cmd_complete(args, cfg: Dict) -> int:
    cc = dict(cfg.get("completer", cfg))
    cc.pop("name", None)
    if args.seed is not None:
        cc["seed"] = args.seed
    if "clip" in cc:
        cc["clip"] = tuple(cc["clip"])
    x = load_matrix(args.observed)
    p = load_array(args.propensity) if args.propensity else None
    res = complete(x, p, CompletionConfig(**cc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_array(out / "S_hat.csv", res.S_hat.data)
    _dump(res.run_record(), out / "run.json")
    print(out / "S_hat.csv")
    return 0


def cmd_evaluate(args, cfg: Dict) -> int:
    s_hat = load_array(args.completed)
    target = load_matrix(args.target)
    p = load_array(args.propensity) if args.propensity else None
    result = {}
    for k in LossKind:
        if target.is_complete:
            result[f"full-{k.value}"] = full_loss(s_hat, target.values, k).value
        else:
            result[k.value] = observed_loss(s_hat, target, k).value
            if p is not None:
                result[f"IPS-{k.value}"] = ips_loss(s_hat, target, p, k).value
                result[f"SNIPS-{k.value}"] = snips_loss(s_hat, target, p, k).value
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_audit(args, cfg: Dict) -> int:
    ac = dict(cfg.get("audit", cfg)) if isinstance(cfg.get("audit", cfg), dict) else {}
    if args.manifest:
        man = json.loads(Path(args.manifest).read_text())
        ac.setdefault("theta", man["theta_hat"])
        ac.setdefault("alpha", man["alpha_hat"])
    psi = ac.get("psi", 5.0)
    params = audit_mod.AssumptionParams(theta=ac["theta"], alpha=ac["alpha"], phi=ac.get("phi", psi), psi=psi,
                                        delta=ac.get("delta", 0.05))
    tau, gamma = ac.get("tau", 1.0), ac.get("gamma", 4.0)
    p_hat = load_array(args.p_hat)
    audits = []
    if args.p_true:
        audits.append(audit_mod.audit_propensity_bound(p_hat, load_array(args.p_true), params, tau, gamma=gamma))
    if args.completed and args.x_star and args.observed:
        s_hat, x_star, x = load_array(args.completed), load_array(args.x_star), load_matrix(args.observed)
        for k in LossKind:
            audits.append(audit_mod.audit_debias_bound(s_hat, x_star, x, p_hat, params, tau, gamma, k))
    if not audits:
        raise SystemExit("audit needs --p-true, or --completed with --x-star and --observed")
    text = json.dumps([a.to_dict() for a in audits], indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_experiment(args, cfg: Dict) -> int:
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if args.out:
        cfg["output_dir"] = args.out
    ec = ExperimentConfig.from_dict(cfg)
    report = run_experiment(ec)
    out = ec.output_dir or "results"
    emit_report(report, out, args.formats or FORMATS)
    print(markdown_table(report), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mnar-debias", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic truth and one observed sample")
    p.add_argument("--out", required=True)

    p = add("fit-propensity", cmd_fit_propensity, "estimate propensities from an observed matrix")
    p.add_argument("--observed", required=True, help="dense CSV or triplet file; its mask is used")
    p.add_argument("--method", choices=["1bitmc", "1bitmc-modified", "naive-bayes", "logistic", "logistic-U", "logistic-I"])
    p.add_argument("--mar", help="CSV of missing-at-random ratings (naive-bayes)")
    p.add_argument("--user-features")
    p.add_argument("--item-features")
    p.add_argument("--out", required=True)

    p = add("complete", cmd_complete, "fit a (debiased) completion model")
    p.add_argument("--observed", required=True)
    p.add_argument("--propensity", help="CSV of propensities; omit for unweighted fitting")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "losses of a completed matrix against a target")
    p.add_argument("--completed", required=True)
    p.add_argument("--target", required=True, help="complete matrix (full loss) or observed entries")
    p.add_argument("--propensity")
    p.add_argument("--out")

    p = add("audit", cmd_audit, "check the finite-sample bounds on given fits")
    p.add_argument("--p-hat", required=True)
    p.add_argument("--p-true")
    p.add_argument("--manifest", help="generator manifest supplying theta and alpha")
    p.add_argument("--completed")
    p.add_argument("--x-star")
    p.add_argument("--observed")
    p.add_argument("--out")

    p = add("experiment", cmd_experiment, "run a repeated, cross-validated experiment")
    p.add_argument("--jobs", type=int, help="parallel repeats")
    p.add_argument("--out", help="report directory (overrides output_dir)")
    p.add_argument("--formats", nargs="+", choices=FORMATS)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = _load_config(args.config)
    try:
        return args.func(args, cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
