"""Closed-form bias of the treatment effect under spatial misspecification.

Three mechanisms are quantified for a linear outcome model fit without
the offending term:

* interference: the outcome responds to neighbors' treatment through a
  spatial lag ``W A``, but the fitted model omits it;
* direct spatial confounding: an unobserved spatial field influences
  both treatment and outcome at the same locations;
* indirect spatial confounding: the unobserved field acts on the
  outcome through a neighborhood average ``W U``.

Every formula is a conditional expectation of the estimation error
given the realized treatment, so each one can be checked against
Monte Carlo refits that redraw only the omitted quantity.  Centering
conventions follow the derivations: the interference and indirect
formulas expect the treatment already centered (callers pass it that
way; the functions evaluate whatever they are given), while the direct
formula regresses on an explicit intercept plus the raw treatment.

All matrix work is factor-and-solve; no inverse is materialized.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgumentError
from .geocore import PoissonPairSpec
from .linalg import right_divide, spd_factor, spd_solve, warn_if_ill_conditioned
from .weights import WeightMatrix


def _weight_array(w) -> np.ndarray:
    if isinstance(w, WeightMatrix):
        return w.matrix
    m = np.asarray(w, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError("weights must form a square matrix")
    return m


def _vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=float).reshape(-1)
    if v.size < 2:
        raise InvalidArgumentError("treatment vector needs at least two entries")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("treatment vector must be finite")
    return v


def si_bias_nonspatial(treatment, w, effect_lag: float) -> float:
    """Interference bias of the OLS treatment slope.

    ``effect_lag * (A' W A) / (A' A)`` evaluated on the treatment as
    given.  Pass the centered treatment to reproduce the slope bias of
    an intercept-including fit when ``W`` rows sum to one.
    """
    a = _vector(treatment)
    m = _weight_array(w)
    if m.shape[0] != a.size:
        raise InvalidArgumentError("weights do not match the treatment length")
    denom = float(a @ a)
    if denom <= 0.0:
        raise InvalidArgumentError("treatment vector is identically zero")
    return effect_lag * float(a @ (m @ a)) / denom


def si_bias_spatial(treatment, w, cov_matrix, effect_lag: float) -> float:
    """Interference bias of the GLS treatment slope under covariance ``cov_matrix``.

    ``effect_lag * (A' C^{-1} W A) / (A' C^{-1} A)``; reduces to the
    OLS expression when the covariance is the identity.
    """
    a = _vector(treatment)
    m = _weight_array(w)
    c = np.asarray(cov_matrix, dtype=float)
    if m.shape[0] != a.size or c.shape != (a.size, a.size):
        raise InvalidArgumentError("shape mismatch among treatment, weights and covariance")
    factor = spd_factor(c)
    ca = spd_solve(factor, a)
    denom = float(a @ ca)
    if denom <= 0.0:
        raise InvalidArgumentError("covariance-weighted treatment norm is not positive")
    return effect_lag * float(ca @ (m @ a)) / denom


def poisson_confounding_bias(effect_conf: float, pair: PoissonPairSpec) -> float:
    """Omitted-confounder bias for the Poisson convolution pair.

    Equals ``effect_conf * rate_shared / (rate_own + rate_shared)``
    regardless of the error covariance, because the conditional mean of
    the confounder is exactly linear in the treatment.
    """
    return effect_conf * pair.shared_fraction


@dataclass(frozen=True)
class IndirectSCParams:
    """Inputs to the indirect (neighborhood) confounding bias.

    The treatment decomposes into a share that tracks the confounder
    plus an independent remainder; marginally
    ``Var(A) = sd_treat^2 corr_treat + sd_conf^2 corr_conf`` and
    ``Cov(A, U) = rho sd_treat sd_conf corr_conf``.

    Attributes:
        effect_conf_lag: outcome coefficient on the confounder lag.
        rho: cross correlation between treatment and confounder.
        sd_treat, sd_conf: marginal scale of the two components.
        corr_treat, corr_conf: realized correlation matrices.
        conf_weights: neighborhood matrix carrying the confounder lag.
        mean_treat: mean of the (uncentered) treatment field.
    """

    effect_conf_lag: float
    rho: float
    sd_treat: float
    sd_conf: float
    corr_treat: np.ndarray
    corr_conf: np.ndarray
    conf_weights: object
    mean_treat: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidArgumentError("rho must lie in [-1, 1]")
        if self.sd_treat <= 0.0 or self.sd_conf <= 0.0:
            raise InvalidArgumentError("component scales must be positive")


def m_matrix(params: IndirectSCParams) -> np.ndarray:
    """Conditional-mean operator of the confounder given the treatment.

    ``M = rho sd_treat sd_conf corr_conf (sd_treat^2 corr_treat +
    sd_conf^2 corr_conf)^{-1}`` so that
    ``E(U | A) = mean_conf + M (A - mean_treat)``.  Computed as a
    right-division against the factored denominator.
    """
    omega_a = np.asarray(params.corr_treat, dtype=float)
    omega_u = np.asarray(params.corr_conf, dtype=float)
    if omega_a.shape != omega_u.shape or omega_a.ndim != 2:
        raise InvalidArgumentError("correlation matrices must share a square shape")
    denom = params.sd_treat**2 * omega_a + params.sd_conf**2 * omega_u
    warn_if_ill_conditioned(denom, "treatment covariance mixture")
    return params.rho * params.sd_treat * params.sd_conf * right_divide(omega_u, denom)


def indirect_sc_bias(treatment, params: IndirectSCParams, cov_matrix=None) -> float:
    """Bias from omitting the confounder lag ``W U``.

    ``effect_conf_lag * (A' C^{-1} W' M (A - mean_treat)) /
    (A' C^{-1} A)`` with ``C = I`` for the OLS version.  The quadratic
    forms use the treatment as given (pass it centered); the
    conditional-mean argument subtracts ``mean_treat`` explicitly.
    """
    a = _vector(treatment)
    phi = _weight_array(params.conf_weights)
    if phi.shape[0] != a.size:
        raise InvalidArgumentError("confounder weights do not match the treatment")
    mix = m_matrix(params)
    inner = mix @ (a - params.mean_treat)
    lagged = phi.T @ inner
    if cov_matrix is None:
        denom = float(a @ a)
        num = float(a @ lagged)
    else:
        c = np.asarray(cov_matrix, dtype=float)
        factor = spd_factor(c)
        ca = spd_solve(factor, a)
        denom = float(a @ ca)
        num = float(ca @ lagged)
    if denom <= 0.0:
        raise InvalidArgumentError("treatment norm is not positive")
    return params.effect_conf_lag * num / denom


@dataclass(frozen=True)
class DirectSCParams:
    """Inputs to the direct (same-site) confounding bias.

    The treatment mixes a confounder-driven scale (correlation
    ``corr_conf_scale``, share ``1 - share_indep`` of its variance)
    with an independent scale (correlation ``corr_indep_scale``, share
    ``share_indep``).  By default
    ``share_indep = sd_indep^2 / (sd_indep^2 + sd_conf^2)``; pass
    ``share_override`` to force any other reading of that proportion.

    Attributes:
        effect_conf: outcome coefficient on the omitted confounder.
        rho: site-wise correlation between treatment and confounder.
        sd_treat: marginal standard deviation of the treatment.
        sd_conf: standard deviation of the confounder.
        sd_indep: standard deviation of the confounder-independent scale.
        corr_conf_scale: correlation matrix of the confounder-driven scale.
        corr_indep_scale: correlation matrix of the independent scale.
        mean_treat: mean of the treatment field.
        share_override: optional replacement for the variance share.
    """

    effect_conf: float
    rho: float
    sd_treat: float
    sd_conf: float
    sd_indep: float
    corr_conf_scale: np.ndarray
    corr_indep_scale: np.ndarray
    mean_treat: float = 0.0
    share_override: float | None = None

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise InvalidArgumentError("rho must lie in [-1, 1]")
        if self.sd_treat <= 0.0 or self.sd_conf <= 0.0 or self.sd_indep < 0.0:
            raise InvalidArgumentError("scales must be positive (independent scale nonnegative)")

    @property
    def share_indep(self) -> float:
        """Variance share of the independent scale, in (0, 1)."""
        if self.share_override is not None:
            share = float(self.share_override)
        else:
            share = self.sd_indep**2 / (self.sd_indep**2 + self.sd_conf**2)
        if not 0.0 < share < 1.0:
            raise InvalidArgumentError(
                f"variance share must lie strictly in (0, 1), got {share}"
            )
        return share


def direct_scale_operator(params: DirectSCParams) -> np.ndarray:
    """The smoothing operator mapping centered treatment to the bias direction.

    ``K = p (p I + (1 - p) R_u R_c^{-1})^{-1}`` with ``p`` the
    independent-scale variance share, ``R_u`` the confounder-scale
    correlation and ``R_c`` the independent-scale correlation.  With
    equal correlation matrices this collapses to ``p I``.
    """
    p = params.share_indep
    r_u = np.asarray(params.corr_conf_scale, dtype=float)
    r_c = np.asarray(params.corr_indep_scale, dtype=float)
    if r_u.shape != r_c.shape or r_u.ndim != 2:
        raise InvalidArgumentError("scale correlation matrices must share a square shape")
    ratio = right_divide(r_u, r_c)
    g = p * np.eye(r_u.shape[0]) + (1.0 - p) * ratio
    warn_if_ill_conditioned(g, "direct-confounding scale operator")
    return p * np.linalg.solve(g, np.eye(g.shape[0]))


def direct_sc_bias(treatment, params: DirectSCParams, cov_matrix=None) -> float:
    """Bias from omitting the same-site confounder.

    Regresses ``K (A - mean_treat)`` on an intercept plus the raw
    treatment (generalized by ``cov_matrix`` when given) and scales the
    slope component by ``effect_conf * rho * sd_conf / sd_treat``.
    Returns the slope entry only.
    """
    a = _vector(treatment)
    p = params.share_indep
    r_u = np.asarray(params.corr_conf_scale, dtype=float)
    r_c = np.asarray(params.corr_indep_scale, dtype=float)
    if r_u.shape[0] != a.size:
        raise InvalidArgumentError("correlation matrices do not match the treatment")
    ratio = right_divide(r_u, r_c)
    g = p * np.eye(a.size) + (1.0 - p) * ratio
    direction = p * np.linalg.solve(g, a - params.mean_treat)
    design = np.column_stack([np.ones_like(a), a])
    if cov_matrix is None:
        xtx = design.T @ design
        xtq = design.T @ direction
    else:
        c = np.asarray(cov_matrix, dtype=float)
        factor = spd_factor(c)
        cx = spd_solve(factor, design)
        xtx = design.T @ cx
        xtq = cx.T @ direction
    slope = np.linalg.solve(xtx, xtq)[1]
    return params.effect_conf * params.rho * (params.sd_conf / params.sd_treat) * float(slope)


def combined_bias(treatment, treat_weights, effect_treat_lag: float,
                  direct_params: DirectSCParams, indirect_params: IndirectSCParams,
                  cov_matrix=None) -> float:
    """Total slope bias when interference and both confounding routes are omitted.

    The sum of the three component formulas under one consistent set of
    conventions: the interference and indirect terms evaluate on the
    empirically centered treatment while their conditional-mean
    arguments keep the uncentered field, and the direct term regresses
    on an intercept plus the raw treatment.
    """
    a = _vector(treatment)
    centered = a - a.mean()
    si = (si_bias_nonspatial(centered, treat_weights, effect_treat_lag)
          if cov_matrix is None
          else si_bias_spatial(centered, treat_weights, cov_matrix, effect_treat_lag))
    direct = direct_sc_bias(a, direct_params, cov_matrix)
    shifted = replace(indirect_params,
                      mean_treat=indirect_params.mean_treat - float(a.mean()))
    indirect = indirect_sc_bias(centered, shifted, cov_matrix)
    return si + direct + indirect


def correct_for_interference(estimate, treatment, w, effect_lag: float,
                             cov_matrix=None) -> float:
    """Subtract the analytic interference bias from a fitted slope.

    ``estimate`` may be a float or a FitResult-like object exposing
    ``coefficient("treatment")``.  Pass the same (centered) treatment
    and weights the interference formula would use for the fit at hand.
    """
    if hasattr(estimate, "coefficient"):
        value = estimate.coefficient("treatment")
    else:
        value = float(estimate)
    if cov_matrix is None:
        shift = si_bias_nonspatial(treatment, w, effect_lag)
    else:
        shift = si_bias_spatial(treatment, w, cov_matrix, effect_lag)
    return value - shift


def _digest(value) -> str:
    h = hashlib.sha256()
    try:
        arr = np.ascontiguousarray(np.asarray(value, dtype=float))
    except (TypeError, ValueError):
        h.update(repr(value).encode())
    else:
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def audit_record(formula: str, value: float, **inputs) -> dict:
    """Audit entry for one bias evaluation: formula id, value, input digests."""
    return {
        "formula": formula,
        "value": float(value),
        "inputs": {name: _digest(v) for name, v in sorted(inputs.items())},
    }


def write_audit(records: list[dict], path) -> None:
    """Write audit records as deterministic JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, sort_keys=True, indent=2)
        fh.write("\n")
