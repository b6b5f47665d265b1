"""Estimation of the transition-intensity coefficients and network structure.

The log-likelihood is a sum over risk strata, tensor rows and children of
``count * log(rate) - exposure * rate`` with ``log(rate)`` linear in the
compact coefficients, so each child's block is a Poisson regression with an
exposure offset.  The blocks are likelihood-separable and solved
independently: damped Newton for the smooth maximum-likelihood problem and a
monotone accelerated proximal-gradient loop (block soft-thresholding) for the
adaptive group-lasso problem that performs structure learning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import LOG_RATE_LIMIT
from .errors import ConvergenceError, DataError, NumericalError
from .network import risk_strata
from .params import (
    FIRST_PARENT_GROUP,
    GROUP_OWN_STATE,
    CompactParams,
    activation_matrix,
    n_groups,
    parents_of,
)

__all__ = [
    "FitConfig",
    "log_likelihood",
    "log_likelihood_gradient",
    "block_soft_threshold",
    "fit_mle",
    "fit_group_lasso",
    "cross_validate",
    "extract_structure",
    "IntensityNetworkLearner",
]


@dataclass(frozen=True)
class FitConfig:
    """Solver and structure-learning settings.

    ``lam`` weights the adaptive group penalty; ``tol`` is the relative
    objective-change tolerance, ``gradient_tol`` the max-norm gradient target
    of the smooth solver.  Groups whose unpenalized norm falls below
    ``adaptive_weight_floor`` get the capped weight ``lam / floor``.
    """

    lam: float = 0.0
    cv_folds: int = 5
    max_iter: int = 500
    tol: float = 1e-8
    gradient_tol: float = 1e-6
    edge_threshold: float = 1e-6
    penalize_own_state: bool = True
    adaptive_weight_floor: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise DataError("penalty weight must be non-negative")
        if self.cv_folds < 2:
            raise DataError("cross-validation needs at least 2 folds")
        if self.max_iter < 1 or self.tol <= 0:
            raise DataError("max_iter and tol must be positive")


def _stratum_cells(tensor, z, stats):
    """Log-rates and the active-cell mask for one stratum."""
    log_rates = tensor @ z  # (rows, children)
    active = stats.exposure > 0
    if np.any(log_rates[active] > LOG_RATE_LIMIT):
        raise NumericalError("log-intensity exceeds the overflow guard")
    return log_rates, active


def log_likelihood(params: CompactParams, strata) -> float:
    """Poisson log-likelihood of per-stratum sufficient statistics.

    ``strata`` pairs each distinct design vector with its
    :class:`~dfctbn.network.SufficientStats`; cells without exposure
    contribute nothing.
    """
    tensor = params.expand()
    total = 0.0
    for z, stats in strata:
        log_rates, active = _stratum_cells(tensor, z, stats)
        total += float(
            (stats.counts[active] * log_rates[active]).sum()
            - (stats.exposure[active] * np.exp(log_rates[active])).sum()
        )
    if not np.isfinite(total):
        raise NumericalError("log-likelihood is not finite")
    return total


def log_likelihood_gradient(params: CompactParams, strata) -> np.ndarray:
    """Gradient of :func:`log_likelihood` in the compact layout (D, D+1, m+1)."""
    d = params.n_conditions
    act = activation_matrix(d)
    tensor = params.expand()
    grad = np.zeros_like(params.coefficients)
    for z, stats in strata:
        log_rates, active = _stratum_cells(tensor, z, stats)
        residual = np.where(
            active, stats.counts - stats.exposure * np.exp(log_rates), 0.0
        )
        grad += np.einsum("crg,rc,k->cgk", act, residual, z)
    return grad


# ---------------------------------------------------------------------------
# per-child design matrices


@dataclass
class _ChildDesign:
    """Flattened Poisson-regression view of one child's active cells."""

    design: np.ndarray  # (n_obs, n_groups * n_coeffs)
    exposure: np.ndarray
    counts: np.ndarray
    identifiable: np.ndarray  # columns with any exposure-weighted support


def _child_designs(strata, n_conditions, n_coeffs):
    act = activation_matrix(n_conditions)
    designs = []
    for child in range(n_conditions):
        blocks, exposures, counts = [], [], []
        for z, stats in strata:
            rows = np.nonzero(stats.exposure[:, child] > 0)[0]
            if rows.size == 0:
                continue
            # design row per cell: activation pattern (groups) x covariates
            blocks.append(
                (act[child, rows, :, None] * z[None, None, :]).reshape(rows.size, -1)
            )
            exposures.append(stats.exposure[rows, child])
            counts.append(stats.counts[rows, child])
        p = n_groups(n_conditions) * n_coeffs
        if blocks:
            design = np.vstack(blocks)
            exposure = np.concatenate(exposures)
            count = np.concatenate(counts)
        else:
            design = np.zeros((0, p))
            exposure = np.zeros(0)
            count = np.zeros(0)
        identifiable = (exposure[:, None] * np.abs(design)).sum(axis=0) > 0
        designs.append(_ChildDesign(design, exposure, count, identifiable))
    return designs


def _neg_ll(design, exposure, counts, beta):
    eta = design @ beta
    if eta.size and eta.max(initial=-np.inf) > LOG_RATE_LIMIT:
        return np.inf, None
    rates = np.exp(eta)
    return float((exposure * rates).sum() - counts @ eta), rates


def _neg_ll_grad(design, exposure, counts, rates):
    return design.T @ (exposure * rates - counts)


# ---------------------------------------------------------------------------
# maximum likelihood


def _newton_child(child, dz: _ChildDesign, config: FitConfig):
    p = dz.design.shape[1]
    beta = np.zeros(p)
    free = dz.identifiable
    if not free.any():
        return beta, 0
    X = dz.design[:, free]
    f, rates = _neg_ll(X, dz.exposure, dz.counts, beta[free])
    for iteration in range(config.max_iter):
        grad = _neg_ll_grad(X, dz.exposure, dz.counts, rates)
        if np.max(np.abs(grad)) < config.gradient_tol:
            beta[free] = beta[free]
            return beta, iteration
        w = dz.exposure * rates
        hess = X.T @ (w[:, None] * X)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            ridge = 1e-10 * (np.trace(hess) / hess.shape[0] + 1.0)
            step = np.linalg.solve(hess + ridge * np.eye(hess.shape[0]), grad)
        # backtracking line search on the convex objective
        t = 1.0
        for _ in range(60):
            candidate = beta[free] - t * step
            f_new, rates_new = _neg_ll(X, dz.exposure, dz.counts, candidate)
            if f_new <= f - 1e-4 * t * (grad @ step):
                break
            t *= 0.5
        else:
            raise ConvergenceError(f"line search failed for child {child}")
        rel_change = abs(f - f_new) / max(1.0, abs(f_new))
        beta[free] = candidate
        f, rates = f_new, rates_new
        if rel_change < config.tol:
            return beta, iteration + 1
    grad = _neg_ll_grad(X, dz.exposure, dz.counts, rates)
    if np.max(np.abs(grad)) > 1e-4:
        raise ConvergenceError(
            f"maximum-likelihood solver for child {child} did not converge "
            f"after {config.max_iter} iterations"
        )
    return beta, config.max_iter


def fit_mle(trajectories, config: FitConfig | None = None, *, strata=None) -> CompactParams:
    """Maximum-likelihood coefficients via damped Newton, child by child.

    Coefficients with no exposure-weighted support in the design are pinned
    to zero and reported through a warning.
    """
    config = config or FitConfig()
    if strata is None:
        strata = risk_strata(trajectories)
    if not strata:
        raise DataError("no transition data to fit")
    d = strata[0][1].n_conditions
    k = strata[0][0].shape[0]
    designs = _child_designs(strata, d, k)
    if all(dz.exposure.sum() == 0 for dz in designs):
        raise DataError("all children have zero exposure")
    coeffs = np.zeros((d, n_groups(d), k))
    pinned = 0
    for child, dz in enumerate(designs):
        beta, _ = _newton_child(child, dz, config)
        coeffs[child] = beta.reshape(n_groups(d), k)
        pinned += int((~dz.identifiable).sum())
    if pinned:
        warnings.warn(
            f"{pinned} coefficients had no exposure support and were pinned to 0",
            stacklevel=2,
        )
    return CompactParams(coeffs)


# ---------------------------------------------------------------------------
# adaptive group lasso


def block_soft_threshold(group, threshold):
    """max(0, 1 - threshold / ||g||) * g, the proximal step of one group."""
    norm = np.linalg.norm(group)
    if norm <= threshold:
        return np.zeros_like(group)
    return (1.0 - threshold / norm) * group


def _penalized_slots(n_conditions, penalize_own_state):
    slots = list(range(FIRST_PARENT_GROUP, n_groups(n_conditions)))
    if penalize_own_state:
        slots = [GROUP_OWN_STATE] + slots
    return slots


def _group_weights(reference: CompactParams, child, slots, config):
    weights = np.zeros(n_groups(reference.n_conditions))
    for slot in slots:
        norm = np.linalg.norm(reference.coefficients[child, slot])
        weights[slot] = config.lam / max(norm, config.adaptive_weight_floor)
    return weights


def _penalty(beta_groups, weights, group_size):
    return group_size * sum(
        weights[g] * np.linalg.norm(beta_groups[g])
        for g in np.nonzero(weights)[0]
    )


def _prox(beta_groups, weights, group_size, step):
    out = beta_groups.copy()
    for g in np.nonzero(weights)[0]:
        out[g] = block_soft_threshold(out[g], step * group_size * weights[g])
    return out


def _fista_child(child, dz: _ChildDesign, start, weights, config: FitConfig):
    """Monotone FISTA on the penalized negative log-likelihood of one child."""
    n_grp, k = start.shape
    free = dz.identifiable.reshape(n_grp, k)

    def f_and_rates(b):
        return _neg_ll(dz.design, dz.exposure, dz.counts, b.reshape(-1))

    def objective(b):
        value, _ = f_and_rates(b)
        return value + _penalty(b, weights, k)

    x = start * free
    y = x
    f_best = objective(x)
    t = 1.0
    lipschitz = 1.0
    stall = 0
    for iteration in range(config.max_iter):
        f_y, rates = f_and_rates(y)
        if rates is None:  # momentum overshot the overflow guard; restart
            y, t = x, 1.0
            f_y, rates = f_and_rates(y)
        grad = _neg_ll_grad(dz.design, dz.exposure, dz.counts, rates)
        grad = grad.reshape(n_grp, k) * free
        while True:
            z = _prox(y - grad / lipschitz, weights, k, 1.0 / lipschitz) * free
            diff = z - y
            f_z, _ = f_and_rates(z)
            quad = f_y + (grad * diff).sum() + 0.5 * lipschitz * (diff * diff).sum()
            if f_z <= quad + 1e-12 * max(1.0, abs(quad)):
                break
            lipschitz *= 2.0
            if lipschitz > 1e18:
                raise ConvergenceError(f"step search failed for child {child}")
        obj_z = f_z + _penalty(z, weights, k)
        if obj_z <= f_best:
            rel_change = abs(f_best - obj_z) / max(1.0, abs(obj_z))
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = z + ((t - 1.0) / t_new) * (z - x)
            x = z
            f_best = obj_z
            t = t_new
        else:
            # monotone safeguard: keep x and restart the momentum, so the
            # next step is a plain proximal step (strict descent off-optimum)
            rel_change = 0.0
            y, t = x, 1.0
        lipschitz = max(lipschitz * 0.7, 1e-12)
        stall = stall + 1 if rel_change < config.tol else 0
        if stall >= 5:
            return x, iteration + 1
    return x, config.max_iter


def fit_group_lasso(
    trajectories,
    config: FitConfig | None = None,
    *,
    strata=None,
    mle_params: CompactParams | None = None,
) -> CompactParams:
    """Adaptive group-lasso estimate of the coefficients.

    Minimizes the penalized negative log-likelihood with one L2 group per
    candidate edge (and, by default, per own-state block), weighted inversely
    by the unpenalized estimate so that weak edges are driven exactly to
    zero.  The baseline group is never penalized.  A precomputed ``mle_params``
    skips the internal unpenalized fit (used by cross-validation).
    """
    config = config or FitConfig()
    if strata is None:
        strata = risk_strata(trajectories)
    if not strata:
        raise DataError("no transition data to fit")
    if mle_params is None:
        mle_params = fit_mle(None, config, strata=strata)
    d = mle_params.n_conditions
    k = mle_params.n_factors + 1
    designs = _child_designs(strata, d, k)
    slots = _penalized_slots(d, config.penalize_own_state)
    coeffs = np.zeros_like(mle_params.coefficients)
    for child, dz in enumerate(designs):
        weights = _group_weights(mle_params, child, slots, config)
        beta, _ = _fista_child(
            child, dz, mle_params.coefficients[child].copy(), weights, config
        )
        coeffs[child] = beta
    return CompactParams(coeffs)


def penalized_objective(params: CompactParams, strata, reference: CompactParams, config: FitConfig) -> float:
    """Value of the group-lasso objective (negative log-likelihood + penalty)."""
    slots = _penalized_slots(params.n_conditions, config.penalize_own_state)
    k = params.n_factors + 1
    total = -log_likelihood(params, strata)
    for child in range(params.n_conditions):
        weights = _group_weights(reference, child, slots, config)
        total += _penalty(params.coefficients[child], weights, k)
    return total


# ---------------------------------------------------------------------------
# model selection and structure extraction


@dataclass(frozen=True)
class CvCurve:
    """Held-out negative log-likelihood per penalty value."""

    lambdas: np.ndarray
    mean_nll: np.ndarray
    folds_used: np.ndarray


def _fold_scores(trajectories, held_out, grid, config):
    """Held-out negative log-likelihood per grid value for one fold (None if
    the fold carries no transitions on either side)."""
    train = [t for t in trajectories if t.patient_id not in held_out]
    test = [t for t in trajectories if t.patient_id in held_out]
    test_strata = risk_strata(test)
    train_strata = risk_strata(train)
    if (
        sum(s.n_transitions for _, s in test_strata) == 0
        or sum(s.n_transitions for _, s in train_strata) == 0
    ):
        return None
    mle = fit_mle(None, config, strata=train_strata)
    out = []
    for lam in grid:
        fitted = fit_group_lasso(
            None, replace(config, lam=lam), strata=train_strata, mle_params=mle
        )
        out.append(-log_likelihood(fitted, test_strata))
    return out


def cross_validate(trajectories, lambda_grid, config: FitConfig | None = None, *, n_jobs=1):
    """Select the penalty weight by patient-level cross-validation.

    Folds partition patients (never visits).  Each fold's unpenalized fit is
    reused across the grid to form the adaptive weights.  Folds may run in
    parallel (``n_jobs``); results are reduced in fold order and never depend
    on the worker count.  Returns ``(best_lambda, curve)`` where the curve
    reports every grid point.
    """
    config = config or FitConfig()
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise DataError("empty penalty grid")
    trajectories = list(trajectories)
    ids = sorted({t.patient_id for t in trajectories})
    if len(ids) < config.cv_folds:
        raise DataError(
            f"{len(ids)} patients cannot fill {config.cv_folds} folds"
        )
    folds = [set(chunk) for chunk in np.array_split(np.asarray(ids, dtype=object), config.cv_folds)]
    from joblib import Parallel, delayed

    results = Parallel(n_jobs=n_jobs)(
        delayed(_fold_scores)(trajectories, held_out, grid, config)
        for held_out in folds
    )
    scores = np.full((len(grid), config.cv_folds), np.nan)
    for fold_idx, result in enumerate(results):
        if result is None:
            warnings.warn(
                f"fold {fold_idx} has no transitions and was skipped", stacklevel=2
            )
            continue
        scores[:, fold_idx] = result
    used = ~np.isnan(scores)
    if not used.any():
        raise DataError("every cross-validation fold was skipped")
    mean_nll = np.nanmean(scores, axis=1)
    curve = CvCurve(np.asarray(grid), mean_nll, used.sum(axis=1))
    return grid[int(np.argmin(mean_nll))], curve


def extract_structure(params: CompactParams, edge_threshold: float = 1e-6) -> np.ndarray:
    """Boolean adjacency (parent, child): edge present when the parent group's
    norm exceeds the threshold.  The diagonal is always False."""
    return params.edge_norms() > edge_threshold


# ---------------------------------------------------------------------------
# estimator front-end


class IntensityNetworkLearner(BaseEstimator):
    """Learns the intensity network from trajectories, scikit-learn style.

    Parameters mirror :class:`FitConfig`; ``lam`` may be a float or ``"cv"``
    to select it on ``lambda_grid`` by patient-level cross-validation.
    ``penalty="mle"`` skips regularization entirely.
    """

    def __init__(
        self,
        penalty="group_lasso",
        lam=1.0,
        lambda_grid=(0.1, 1.0, 10.0, 100.0),
        cv_folds=5,
        max_iter=500,
        tol=1e-8,
        gradient_tol=1e-6,
        edge_threshold=1e-6,
        penalize_own_state=True,
    ):
        self.penalty = penalty
        self.lam = lam
        self.lambda_grid = lambda_grid
        self.cv_folds = cv_folds
        self.max_iter = max_iter
        self.tol = tol
        self.gradient_tol = gradient_tol
        self.edge_threshold = edge_threshold
        self.penalize_own_state = penalize_own_state

    def _config(self, lam=0.0):
        return FitConfig(
            lam=lam,
            cv_folds=self.cv_folds,
            max_iter=self.max_iter,
            tol=self.tol,
            gradient_tol=self.gradient_tol,
            edge_threshold=self.edge_threshold,
            penalize_own_state=self.penalize_own_state,
        )

    def fit(self, trajectories, y=None):
        trajectories = list(trajectories)
        if self.penalty not in ("mle", "group_lasso"):
            raise DataError(f"unknown penalty {self.penalty!r}")
        self.cv_curve_ = None
        if self.penalty == "mle":
            self.lambda_ = 0.0
            self.params_ = fit_mle(trajectories, self._config())
        else:
            lam = self.lam
            if lam == "cv":
                lam, self.cv_curve_ = cross_validate(
                    trajectories, self.lambda_grid, self._config()
                )
            self.lambda_ = float(lam)
            self.params_ = fit_group_lasso(trajectories, self._config(self.lambda_))
        self.structure_ = extract_structure(self.params_, self.edge_threshold)
        self.tensor_ = self.params_.expand()
        return self

    def score(self, trajectories, y=None):
        """Mean log-likelihood per observed transition."""
        check_is_fitted(self, "params_")
        strata = risk_strata(list(trajectories))
        n = sum(s.n_transitions for _, s in strata)
        return log_likelihood(self.params_, strata) / max(n, 1.0)

    def predict_emergence(self, z, profile, horizon):
        """Per-condition emergence probability over ``horizon`` years (NaN for
        conditions that are already active)."""
        from .network import emergence_probability

        check_is_fitted(self, "params_")
        profile = np.asarray(profile)
        out = np.full(self.params_.n_conditions, np.nan)
        for child in range(self.params_.n_conditions):
            if profile[child] == 0:
                out[child] = emergence_probability(
                    self.tensor_, z, profile, child, horizon
                )
        return out
