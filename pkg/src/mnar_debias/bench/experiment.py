"""Cross-validated debiasing pipelines over synthetic and real datasets.

One experiment = one dataset, a list of propensity methods and (optionally)
one completer with a hyperparameter grid. Each repeat resamples the revealed
entries (synthetic) or the train/test split (MovieLens), fits propensities on
the training mask only, grid-searches the completer by k-fold CV on the
training entries and evaluates the refit model.
"""
from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import audit as audit_mod
from ..completion import CompletionConfig, complete
from ..core import LossKind, ObservedMatrix, full_loss, ips_loss, observed_loss, propensity_error, snips_loss
from ..propensity import (
    OneBitConfig,
    fit_1bitmc,
    fit_1bitmc_modified,
    fit_logistic_regression,
    fit_naive_bayes,
    select_tau,
)
from ..synthetic import gen_movie_lover, gen_user_item, sample_mar_ratings, sample_observations, substream
from .data import load_coat, load_movielens, split_entries

log = logging.getLogger(__name__)

PROPENSITY_METHODS = ("none", "naive-bayes", "logistic", "logistic-U", "logistic-I", "1bitmc", "1bitmc-modified")
_PREFIX = {
    "none": "",
    "naive-bayes": "NB",
    "logistic": "LR",
    "logistic-U": "LR-U",
    "logistic-I": "LR-I",
    "1bitmc": "1bitMC",
    "1bitmc-modified": "1bitMC-mod",
}
_TABLE1_LABEL = {"naive-bayes": "Naive Bayes"}

DEFAULT_ONEBIT = {"tau": None, "tau_grid": [0.5, 1, 2, 4, 8], "gamma": 4.0, "phi": 0.0, "cv_folds": 5}
DEFAULT_GRIDS = {
    "factorization-ips": {"rank": [5, 10, 20], "lr": [0.001, 0.005, 0.02], "lam": [0.01, 0.1, 1]},
    "softimpute-ips": {"lam": [0.01, 0.1, 1, 10, 100]},
    "nuclear-ips": {"lam": [0.01, 0.1, 1, 10, 100]},
}

# Factorisation grid for the 200x300 synthetic benchmarks. Ranks 5-20 from the
# default grid overfit these problems badly; the optimum sits at rank 2.
SYNTHETIC_PMF = {
    "solver": "factorization-ips",
    "name": "PMF",
    "fixed": {"epochs": 100, "lr_decay": 0.97, "use_biases": False},
    "grid": {"rank": [1, 2, 3], "lam": [0.01, 0.02, 0.05, 0.1], "lr": [0.01, 0.02]},
}


class MissingInputError(ValueError):
    """A propensity method needs data the dataset does not provide."""


@dataclass
class ExperimentConfig:
    dataset: Dict
    methods: List[str] = field(default_factory=lambda: ["none", "1bitmc"])
    completer: Optional[Dict] = None
    folds: int = 5
    repeats: int = 10
    seed: int = 0
    onebit: Dict = field(default_factory=dict)
    naive_bayes: Dict = field(default_factory=lambda: {"mar_fraction": 0.05})
    logistic: Dict = field(default_factory=lambda: {"l2": 1e-4})
    audit: bool = False
    output_dir: Optional[str] = None
    jobs: int = 1

    def __post_init__(self):
        self.onebit = {**DEFAULT_ONEBIT, **(self.onebit or {})}
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        bad = [m for m in self.methods if m not in PROPENSITY_METHODS]
        if bad:
            raise ValueError(f"unknown propensity methods {bad}")
        if self.completer is not None:
            solver = self.completer.get("solver", "factorization-ips")
            grid = self.completer.get("grid", DEFAULT_GRIDS[solver])
            if not grid or (isinstance(grid, dict) and not all(len(v) for v in grid.values())):
                raise ValueError("completer grid must be nonempty")
        if not self.onebit["tau_grid"]:
            raise ValueError("tau grid must be nonempty")

    @classmethod
    def from_dict(cls, d: Dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> Dict:
        return asdict(self)


def grid_cells(grid) -> List[Dict]:
    """Expand ``{"a": [..], "b": [..]}`` in key order, or pass a list of cells through."""
    if isinstance(grid, list):
        return [dict(c) for c in grid]
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def cross_validate(x_train: ObservedMatrix, grid, folds: int = 5, p_hat=None, seed: int = 0,
                   base: Optional[Dict] = None) -> Tuple[Dict, List[Tuple[Dict, float]]]:
    """k-fold grid search over the observed entries.

    The validation loss is the IPS squared error with ``p_hat`` when given,
    the plain observed squared error otherwise. Ties go to the earliest cell.
    """
    cells = grid_cells(grid)
    if not cells:
        raise ValueError("grid must be nonempty")
    rows, cols = x_train.omega()
    if rows.size < folds:
        raise ValueError(f"fewer observed entries ({rows.size}) than folds ({folds})")
    fold_id = np.random.default_rng([seed, 7]).permutation(rows.size) % folds
    masks = []
    for k in range(folds):
        val = np.zeros(x_train.shape, dtype=bool)
        val[rows[fold_id == k], cols[fold_id == k]] = True
        masks.append(val)
    base = dict(base or {})
    table = []
    for cell in cells:
        losses = []
        for k, val in enumerate(masks):
            cfg = CompletionConfig(**{**base, **cell, "seed": base.get("seed", 0) + k})
            res = complete(x_train.restrict(~val), p_hat, cfg)
            x_val = x_train.restrict(val)
            if p_hat is None:
                losses.append(observed_loss(res.S_hat, x_val).value)
            else:
                losses.append(ips_loss(res.S_hat, x_val, p_hat).value)
        table.append((cell, float(np.mean(losses))))
    best = min(range(len(table)), key=lambda j: (table[j][1], j))
    return table[best][0], table


# -- datasets ----------------------------------------------------------------

@dataclass
class RepeatData:
    """Everything a single repeat may use. ``x_test``/``truth`` never reach fitting."""

    x_train: ObservedMatrix
    x_star: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None
    x_test: Optional[ObservedMatrix] = None
    mar_sample: Optional[np.ndarray] = None
    user_features: Optional[np.ndarray] = None
    item_features: Optional[np.ndarray] = None
    clip: Tuple[float, float] = (1.0, 5.0)

    @property
    def synthetic(self) -> bool:
        return self.S is not None


def make_truth(ds: Dict):
    kind = ds["kind"]
    if kind == "user_item":
        return gen_user_item(ds.get("m", 200), ds.get("n", 300), ds.get("d", 20), ds.get("truth_seed", 0))
    if kind == "movie_lover":
        return gen_movie_lover(ds.get("m", 200), ds.get("n", 300), ds.get("p", 0.5), ds.get("truth_seed", 0))
    raise ValueError(f"not a synthetic dataset kind: {kind!r}")


def repeat_data(cfg: ExperimentConfig, r: int, truth=None, cached=None) -> RepeatData:
    ds = cfg.dataset
    kind = ds["kind"]
    seed = cfg.seed * 1000 + r
    clip = tuple(ds.get("clip", (1.0, 5.0)))
    if kind in ("user_item", "movie_lover"):
        sample = sample_observations(truth, ds.get("noise_sd", 1.0), clip, seed)
        mar = sample_mar_ratings(sample.X_star, cfg.naive_bayes.get("mar_fraction", 0.05), seed)
        uf = itf = None
        if kind == "user_item":
            uf, itf = truth.factors["U2"], truth.factors["V2"]
        return RepeatData(sample.X, sample.X_star, truth.S, truth.P, None, mar, uf, itf, clip)
    if kind == "movielens":
        x = cached
        train, test = split_entries(x, ds.get("test_fraction", 0.1), seed)
        return RepeatData(train, x_test=test, clip=clip)
    if kind == "coat":
        coat = cached
        test = coat.test
        mar = None
        frac = cfg.naive_bayes.get("mar_fraction", 0.05)
        if "naive-bayes" in cfg.methods and frac > 0:
            # a slice of the MAR ratings feeds naive Bayes and is dropped from the test set
            rows, cols = test.omega()
            pick = substream(cfg.seed, 20).permutation(rows.size)[: max(1, int(round(frac * rows.size)))]
            held = np.zeros(test.shape, dtype=bool)
            held[rows[pick], cols[pick]] = True
            mar = test.values[held]
            test = test.restrict(~held)
        return RepeatData(coat.train, x_test=test, mar_sample=mar, user_features=coat.user_features,
                          item_features=coat.item_features, clip=clip)
    raise ValueError(f"unknown dataset kind {kind!r}")


def load_cached(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["kind"] == "movielens":
        x, _ = load_movielens(ds["path"], tuple(ds.get("shape", (943, 1682))))
        return x
    if ds["kind"] == "coat":
        shape = ds.get("shape", (290, 300))
        return load_coat(ds["dir"], tuple(shape) if shape else None)
    return None


# -- propensities ------------------------------------------------------------

@dataclass
class PropensityEstimate:
    train: Optional[np.ndarray]  # used for weighting; valid on Omega at least
    full: Optional[np.ndarray]  # over all cells, for error metrics (None if unavailable)
    info: Dict = field(default_factory=dict)


def estimate_propensity(method: str, data: RepeatData, cfg: ExperimentConfig, tau: Optional[float]) -> PropensityEstimate:
    mask = data.x_train.mask()
    if method == "none":
        return PropensityEstimate(None, None)
    if method in ("1bitmc", "1bitmc-modified"):
        ob = cfg.onebit
        if method == "1bitmc":
            fit = fit_1bitmc(mask, OneBitConfig(tau=tau, gamma=ob["gamma"]))
        else:
            fit = fit_1bitmc_modified(mask, OneBitConfig(tau=tau, gamma=ob["gamma"], phi=ob["phi"]))
        return PropensityEstimate(fit.P_hat.data, fit.P_hat.data,
                                  {"tau": tau, "gamma": ob["gamma"], "n_iter": int(fit.n_iter), "converged": bool(fit.converged)})
    if method == "naive-bayes":
        if data.mar_sample is None or len(data.mar_sample) == 0:
            raise MissingInputError("naive-bayes propensities need a missing-at-random rating sample")
        fit = fit_naive_bayes(data.x_train, data.mar_sample)
        full = fit.apply(data.x_star) if data.x_star is not None else None
        return PropensityEstimate(fit.P_hat, full, {"value_map": {str(k): v for k, v in fit.value_map.items()}})
    if method.startswith("logistic"):
        if data.user_features is None or data.item_features is None:
            raise MissingInputError("logistic-regression propensities need user/item features")
        mode = {"logistic": "both", "logistic-U": "U", "logistic-I": "I"}[method]
        fit = fit_logistic_regression(mask, data.user_features, data.item_features, mode, cfg.logistic.get("l2", 1e-4))
        return PropensityEstimate(fit.P_hat.data, fit.P_hat.data, {"degenerate": bool(fit.degenerate)})
    raise ValueError(f"unknown propensity method {method!r}")


def choose_tau(cfg: ExperimentConfig, data: RepeatData) -> Tuple[float, Dict]:
    ob = cfg.onebit
    if ob.get("tau") is not None:
        return float(ob["tau"]), {}
    tau, scores = select_tau(data.x_train.mask(), ob["tau_grid"], ob["gamma"], ob.get("cv_folds", 5), cfg.seed)
    return float(tau), {str(k): v for k, v in scores.items()}


def method_label(method: str, completer_name: Optional[str]) -> str:
    if completer_name is None:
        return _TABLE1_LABEL.get(method, _PREFIX[method] or "none")
    prefix = _PREFIX[method]
    return f"{prefix}-{completer_name}" if prefix else completer_name


# -- one repeat --------------------------------------------------------------

def _evaluate(s_hat, data: RepeatData, snips_p) -> Dict[str, float]:
    out = {}
    if data.synthetic:
        for k in LossKind:
            out[k.value] = full_loss(s_hat, data.S, k).value
            # every cell is a test cell; weights are the true propensities
            out[f"SNIPS-{k.value}"] = snips_loss(s_hat, ObservedMatrix.complete(data.S), data.P, k).value
    else:
        for k in LossKind:
            out[k.value] = observed_loss(s_hat, data.x_test, k).value
            if snips_p is not None:
                out[f"SNIPS-{k.value}"] = snips_loss(s_hat, data.x_test, snips_p, k).value
    return out


def run_repeat(cfg: ExperimentConfig, r: int, truth=None, cached=None, tau: Optional[float] = None) -> Dict:
    t0 = time.perf_counter()
    data = repeat_data(cfg, r, truth, cached)
    comp = cfg.completer
    comp_name = comp.get("name", "PMF") if comp else None
    out = {"repeat": r, "rows": {}, "audits": [], "propensity_info": {}}

    snips_p = None
    if comp and not data.synthetic:
        snips_p = estimate_propensity("1bitmc", data, cfg, tau).train

    for method in cfg.methods:
        if comp is None and method == "none":
            continue
        label = method_label(method, comp_name)
        est = estimate_propensity(method, data, cfg, tau)
        metrics: Dict[str, float] = {}
        if data.synthetic and est.full is not None:
            mse, mae = propensity_error(est.full, data.P)
            metrics["propensity_MSE"], metrics["propensity_MAE"] = mse, mae
        out["propensity_info"][label] = est.info
        chosen = None
        s_hat = None
        if comp is not None:
            solver = comp.get("solver", "factorization-ips")
            base = {**comp.get("fixed", {}), "solver": solver, "clip": data.clip, "seed": cfg.seed * 1000 + r}
            grid = comp.get("grid", DEFAULT_GRIDS[solver])
            chosen, _ = cross_validate(data.x_train, grid, cfg.folds, est.train, cfg.seed * 1000 + r, base)
            res = complete(data.x_train, est.train, CompletionConfig(**{**base, **chosen}))
            s_hat = res.S_hat
            metrics.update(_evaluate(s_hat, data, snips_p))
        out["rows"][label] = {"metrics": metrics, "chosen": chosen}

        if cfg.audit and data.synthetic and method == "1bitmc":
            out["audits"].extend(_audits(cfg, data, truth, est, s_hat, tau))
    out["wall_time"] = time.perf_counter() - t0
    return out


def _audits(cfg, data: RepeatData, truth, est, s_hat, tau) -> List[Dict]:
    gamma = cfg.onebit["gamma"]
    psi = max(abs(data.clip[0]), abs(data.clip[1]))
    params = audit_mod.AssumptionParams(theta=truth.theta_hat(), alpha=truth.alpha_hat(), phi=psi, psi=psi,
                                        delta=cfg.dataset.get("delta", 0.05))
    res = [audit_mod.audit_propensity_bound(est.full, data.P, params, tau, gamma=gamma).to_dict()]
    if s_hat is not None:
        for k in LossKind:
            res.append(audit_mod.audit_debias_bound(s_hat, data.x_star, data.x_train, est.train, params, tau,
                                                    gamma, k).to_dict())
    return res


# -- whole experiment ---------------------------------------------------------

@dataclass
class ExperimentReport:
    config: Dict
    methods: List[str]
    per_repeat: Dict[str, List[Dict[str, float]]]
    chosen: Dict[str, List[Optional[Dict]]]
    audits: List[Dict] = field(default_factory=list)
    extras: Dict = field(default_factory=dict)
    timing: Dict = field(default_factory=dict)

    def metrics(self) -> List[str]:
        names: List[str] = []
        for rows in self.per_repeat.values():
            for rec in rows:
                for k in rec:
                    if k not in names:
                        names.append(k)
        return names

    def summary(self) -> Dict[str, Dict[str, Tuple[float, float]]]:
        """Mean and sample standard deviation (0 for a single repeat) per metric."""
        out = {}
        for label in self.methods:
            rows = self.per_repeat[label]
            out[label] = {}
            for k in self.metrics():
                vals = np.array([r[k] for r in rows if k in r], dtype=float)
                if vals.size == 0:
                    continue
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                out[label][k] = (float(vals.mean()), sd)
        return out

    def mean(self, label: str, metric: str) -> float:
        return self.summary()[label][metric][0]

    def to_dict(self, include_timing: bool = True) -> Dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "ExperimentReport":
        return cls(**d)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    t0 = time.perf_counter()
    synthetic = cfg.dataset["kind"] in ("user_item", "movie_lover")
    # truth is generated once; only revelations and noise change across repeats
    truth = make_truth(cfg.dataset) if synthetic else None
    cached = None if synthetic else load_cached(cfg)

    extras: Dict = {}
    if synthetic:
        extras["truth"] = truth.manifest()
    needs_tau = any(m.startswith("1bitmc") for m in cfg.methods) or (cfg.completer and not synthetic)
    tau = None
    if needs_tau:
        # tau is chosen on the first repeat's training mask and then held fixed
        tau, scores = choose_tau(cfg, repeat_data(cfg, 0, truth, cached))
        extras["tau"] = tau
        extras["tau_cv"] = scores
    for m in cfg.methods:
        if m == "naive-bayes" and cfg.dataset["kind"] == "movielens":
            raise MissingInputError("naive-bayes propensities need a missing-at-random rating sample")
        if m.startswith("logistic") and cfg.dataset["kind"] in ("movie_lover", "movielens"):
            raise MissingInputError("logistic-regression propensities need user/item features")

    args = [(cfg, r, truth, cached, tau) for r in range(cfg.repeats)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_star_run, args))
    else:
        results = [_star_run(a) for a in args]
    results.sort(key=lambda o: o["repeat"])

    labels = list(results[0]["rows"])
    report = ExperimentReport(
        config=json.loads(json.dumps(cfg.to_dict())),
        methods=labels,
        per_repeat={lab: [res["rows"][lab]["metrics"] for res in results] for lab in labels},
        chosen={lab: [res["rows"][lab]["chosen"] for res in results] for lab in labels},
        audits=[dict(a, repeat=res["repeat"]) for res in results for a in res["audits"]],
        extras={**extras, "propensity_info": [res["propensity_info"] for res in results]},
        timing={"repeats": [res["wall_time"] for res in results], "total": time.perf_counter() - t0},
    )
    return report


def _star_run(a):
    return run_repeat(*a)
