"""Numerical checks of the finite-sample guarantees for the 1-bit propensity
estimator: propensity MSE bound, IPS-versus-full loss bounds (MSE and MAE),
and the variants for the estimator that allows propensities of 1."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from .core import LossKind, ObservedMatrix, full_loss, ips_loss
from .propensity import LinkFunction

# universal constant of the high-probability statement
UNIVERSAL_C = 8 * 2 ** 0.25 * math.e ** 2


@dataclass(frozen=True)
class AssumptionParams:
    theta: float
    alpha: float
    phi: float
    psi: float
    delta: float = 0.05
    p_min: Optional[float] = None
    p_critical: Optional[float] = None

    def __post_init__(self):
        for name in ("theta", "alpha", "phi", "psi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.psi < self.phi:
            raise ValueError("psi must be at least phi")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.p_min is not None and not 0 < self.p_min <= 1:
            raise ValueError("p_min must lie in (0, 1]")


@dataclass
class BoundAudit:
    name: str
    lhs: float
    rhs: float
    satisfied: bool
    vacuous: bool
    terms: Dict[str, float] = field(default_factory=dict)
    notes: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.lhs, self.rhs = float(self.lhs), float(self.rhs)
        self.satisfied, self.vacuous = bool(self.satisfied), bool(self.vacuous)
        self.terms = {k: float(v) for k, v in self.terms.items()}
        self.notes = {k: (v.item() if isinstance(v, np.generic) else v) for k, v in self.notes.items()}

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "BoundAudit":
        return cls(**d)


def compute_constants(gamma: float, phi_link: float, p_true=None) -> Dict[str, float]:
    """Lipschitz constant Upsilon, the critical edge Sigma(phi) and f_critical."""
    if not -gamma < phi_link < gamma:
        raise ValueError("phi_link must lie in (-gamma, gamma)")
    link = LinkFunction("piecewise", gamma)
    edge = float(link(phi_link))
    upsilon = max(1.0 + 1.0 / (2 * gamma), (0.25 + 1.0 / (2 * gamma)) / (1.0 - edge))
    out = {"upsilon": upsilon, "sigma_phi": edge}
    if p_true is not None:
        p = np.asarray(p_true, dtype=float)
        out["f_critical"] = float(np.mean((p > edge) & (p < 1.0)))
    return out


def _shape_terms(m, n):
    return 1 / math.sqrt(m) + 1 / math.sqrt(n), m ** -0.25 + n ** -0.25


def _common_notes(m, n, params: AssumptionParams, tau, gamma=None):
    notes = {
        "C": UNIVERSAL_C,
        "failure_probability": UNIVERSAL_C / (m + n) + params.delta,
        "m_plus_n_ge_C": (m + n) >= UNIVERSAL_C,
        "tau_ge_theta": tau >= params.theta,
    }
    if gamma is not None:
        notes["gamma_ge_alpha"] = gamma >= params.alpha
    return notes


def audit_propensity_bound(p_hat, p_true, params: AssumptionParams, tau: float, variant: str = "standard",
                           gamma: Optional[float] = None, phi_link: Optional[float] = None) -> BoundAudit:
    """Propensity MSE against its bound; vacuous when the bound is at least 1."""
    a = np.asarray(getattr(p_hat, "data", p_hat), dtype=float)
    b = np.asarray(getattr(p_true, "data", p_true), dtype=float)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    m, n = a.shape
    lhs = float(np.mean((a - b) ** 2))
    root, _ = _shape_terms(m, n)
    notes = _common_notes(m, n, params, tau, gamma)
    if variant == "standard":
        terms = {"estimation": 4 * math.e * tau * root}
    elif variant == "modified":
        if gamma is None or phi_link is None:
            raise ValueError("modified bound needs gamma and phi_link")
        c = compute_constants(gamma, phi_link, b)
        terms = {
            "estimation": 8 * math.e * c["upsilon"] * tau * root,
            "critical": (1 - c["sigma_phi"]) ** 2 / 2 * c["f_critical"],
        }
        notes.update(c)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    rhs = float(sum(terms.values()))
    return BoundAudit(f"propensity_mse[{variant}]", lhs, rhs, lhs <= rhs, rhs >= 1.0, terms, notes)


def debias_bound_terms(m, n, params: AssumptionParams, tau, gamma, kind=LossKind.MSE, variant="standard",
                       phi_link=None, f_critical=0.0) -> Dict[str, float]:
    """Right-hand side of the IPS-versus-full loss bound, term by term.

    For MAE the psi^2 factors of the MSE bound become psi/2. The same
    substitution is used for the modified variant's MAE form.
    """
    _, quarter = _shape_terms(m, n)
    psi = params.psi
    scale = psi ** 2 if LossKind(kind) is LossKind.MSE else psi / 2
    hoeff = math.sqrt(math.log(2 / params.delta) / (2 * m * n))
    if variant == "standard":
        s_g, s_a = float(expit(-gamma)), float(expit(-params.alpha))
        return {
            "estimation": 8 * scale * math.sqrt(math.e * tau) / (s_g * s_a) * quarter,
            "hoeffding": 4 * scale / s_a * hoeff,
        }
    if variant == "modified":
        if params.p_min is None or phi_link is None:
            raise ValueError("modified bound needs p_min and phi_link")
        c = compute_constants(gamma, phi_link)
        floor = float(LinkFunction("piecewise", gamma)(-gamma))
        pre = 4 * scale / (floor * params.p_min)
        return {
            "estimation": pre * math.sqrt(8 * math.e * c["upsilon"] * tau) * quarter,
            "critical": pre * (1 - c["sigma_phi"]) * math.sqrt(f_critical / 2),
            "hoeffding": 4 * scale / params.p_min * hoeff,
        }
    raise ValueError(f"unknown variant {variant!r}")


def audit_debias_bound(s_hat, x_star, x: ObservedMatrix, p_hat, params: AssumptionParams, tau: float,
                       gamma: float, kind=LossKind.MSE, variant: str = "standard", phi_link=None,
                       p_true=None) -> BoundAudit:
    """|IPS loss with estimated propensities - full loss| against its bound."""
    s = np.asarray(getattr(s_hat, "data", s_hat), dtype=float)
    m, n = s.shape
    ips = ips_loss(s, x, p_hat, kind).value
    full = full_loss(s, x_star, kind).value
    lhs = abs(ips - full)
    f_crit = 0.0
    if variant == "modified" and p_true is not None:
        f_crit = compute_constants(gamma, phi_link, p_true)["f_critical"]
    terms = debias_bound_terms(m, n, params, tau, gamma, kind, variant, phi_link, f_crit)
    rhs = float(sum(terms.values()))
    p = np.asarray(getattr(p_hat, "data", p_hat), dtype=float)
    spread = (2 * params.psi) ** 2 if LossKind(kind) is LossKind.MSE else 2 * params.psi
    trivial = spread / float(p[x.present].min())
    notes = _common_notes(m, n, params, tau, gamma)
    notes.update({"ips_loss": ips, "full_loss": full, "lhs_trivial_max": trivial})
    return BoundAudit(f"debias_{LossKind(kind).value}[{variant}]", lhs, rhs, lhs <= rhs, rhs >= trivial, terms, notes)


def hoeffding_frequency(s_hat, x_star, p_true, params: AssumptionParams, kind=LossKind.MSE,
                        n_resamples: int = 200, seed: int = 0) -> Dict[str, float]:
    """How often the IPS loss with the true propensities strays from the full
    loss by more than the concentration term, over fresh revelation draws."""
    s = np.asarray(getattr(s_hat, "data", s_hat), dtype=float)
    xs = np.asarray(x_star, dtype=float)
    p = np.asarray(getattr(p_true, "data", p_true), dtype=float)
    m, n = s.shape
    scale = params.psi ** 2 if LossKind(kind) is LossKind.MSE else params.psi / 2
    floor = params.p_min if params.p_min is not None else float(expit(-params.alpha))
    threshold = 4 * scale / floor * math.sqrt(math.log(2 / params.delta) / (2 * m * n))
    full = full_loss(s, xs, kind).value
    rng = np.random.default_rng(seed)
    exceed = 0
    devs = []
    for _ in range(n_resamples):
        revealed = rng.random((m, n)) < p
        dev = abs(ips_loss(s, ObservedMatrix(xs, revealed), p, kind).value - full)
        devs.append(dev)
        exceed += dev > threshold
    freq = exceed / n_resamples
    allowed = params.delta + 3 * math.sqrt(params.delta / n_resamples)
    return {"threshold": threshold, "frequency": freq, "allowed": allowed, "passed": freq <= allowed,
            "max_deviation": float(max(devs))}
