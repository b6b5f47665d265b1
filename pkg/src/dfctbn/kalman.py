"""Extended Kalman filtering of the coefficient vector over patient visits.

The network coefficients become the latent state of a linear-Gaussian
transition model; each visit contributes Poisson transition counts with an
exposure offset, observed through the exponential link.  The filter
linearizes that observation map at the predicted mean, uses the Poisson
variance (equal to the predicted mean) as observation noise, and emits the
expanded coefficient tensor after every update for the monitoring module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from ._validation import LOG_RATE_LIMIT, check_design
from .errors import DataError, NumericalError
from .network import Trajectory
from .params import CompactParams, activation_matrix, n_tensor_rows, active_row

__all__ = [
    "EkfState",
    "VisitObservation",
    "FilterConfig",
    "CoefficientFilter",
    "predict_step",
    "run_filter",
    "estimate_transition_matrix",
    "TransitionEstimate",
    "stability_report",
    "StabilityReport",
    "visit_observations",
]


@dataclass(frozen=True)
class EkfState:
    """Gaussian state of the coefficient filter at one time index.

    ``jacobian_norm``, ``innovation_norm`` and ``obs_noise_max`` record the
    last update's diagnostics (None before any update) for stability checks.
    """

    mean: np.ndarray
    cov: np.ndarray
    transition: np.ndarray
    process_noise: np.ndarray
    time_index: int = 0
    jacobian_norm: float | None = None
    innovation_norm: float | None = None
    obs_noise_max: float | None = None
    anchor: np.ndarray | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise DataError("covariance shape does not match the mean")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise NumericalError("filter state is not finite")
        if np.max(np.abs(cov - cov.T)) > 1e-10 * max(1.0, np.abs(cov).max()):
            raise NumericalError("covariance lost symmetry")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(
            self, "process_noise", np.asarray(self.process_noise, dtype=float)
        )

    @property
    def transition_condition(self) -> float:
        return float(np.linalg.cond(self.transition))


@dataclass(frozen=True)
class VisitObservation:
    """Per-visit exposure and transition counts on the (row, child) grid.

    ``z`` is the design vector in effect since the prior visit; counts may be
    positive only where exposure is.
    """

    z: np.ndarray
    exposure: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        z = check_design(self.z)
        exposure = np.asarray(self.exposure, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        if exposure.shape != counts.shape or exposure.ndim != 2:
            raise DataError("exposure and counts must share a 2-d shape")
        if exposure.shape[0] != n_tensor_rows(exposure.shape[1]):
            raise DataError("observation grid does not match 2**D rows")
        if np.any(exposure < 0) or np.any(counts < 0):
            raise DataError("exposure and counts must be non-negative")
        if np.any(counts[exposure == 0] > 0):
            raise DataError("counts require positive exposure")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "exposure", exposure)
        object.__setattr__(self, "counts", counts)

    @property
    def n_conditions(self) -> int:
        return self.exposure.shape[1]


@dataclass(frozen=True)
class FilterConfig:
    """Knobs of :func:`run_filter`.

    ``track="surviving"`` restricts the state to coefficient groups that are
    non-zero in the initial model (the groups that survived shrinkage);
    ``"all"`` tracks the full tensor.  ``process_noise`` is the per-step
    variance added to every tracked coefficient.  ``noise_scale`` inflates the
    observation variance (useful for robustness experiments).
    """

    process_noise: float = 1e-4
    initial_cov: float = 1e-2
    transition: np.ndarray | None = None
    track: str = "surviving"
    noise_scale: float = 1.0
    jitter: float = 1e-9
    mean_reversion: float | None = None


def _symmetrize(matrix):
    return 0.5 * (matrix + matrix.T)


def predict_step(state: EkfState) -> EkfState:
    """Propagate mean and covariance one step through the transition model.

    With an ``anchor`` the transition acts on the deviation from it
    (``mean <- anchor + F (mean - anchor)``), which makes a contraction pull
    the coefficients back toward the anchoring model; without one this is the
    plain linear propagation.
    """
    f = state.transition
    if state.anchor is None:
        mean = f @ state.mean
    else:
        mean = state.anchor + f @ (state.mean - state.anchor)
    cov = _symmetrize(f @ state.cov @ f.T + state.process_noise)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise NumericalError("prediction produced non-finite values")
    return replace(
        state,
        mean=mean,
        cov=cov,
        time_index=state.time_index + 1,
        jacobian_norm=None,
        innovation_norm=None,
        obs_noise_max=None,
    )


class CoefficientFilter:
    """Extended Kalman filter over (a masked subset of) the compact coefficients.

    One instance tracks one patient; the initial model is shared read-only.
    """

    def __init__(
        self,
        template: CompactParams,
        *,
        track="surviving",
        transition=None,
        process_noise: float = 1e-4,
        initial_cov: float = 1e-2,
        noise_scale: float = 1.0,
        jitter: float = 1e-9,
        mean_reversion: float | None = None,
    ):
        self.template = template
        self._template_flat = template.flatten()
        d, n_grp, k = template.coefficients.shape
        if isinstance(track, str):
            if track == "all":
                group_mask = np.ones((d, n_grp), dtype=bool)
            elif track == "surviving":
                group_mask = np.linalg.norm(template.coefficients, axis=2) > 0
            else:
                raise DataError(f"unknown tracking mode {track!r}")
        else:
            group_mask = np.asarray(track, dtype=bool)
            if group_mask.shape != (d, n_grp):
                raise DataError("tracking mask must have shape (D, D+1)")
        if not group_mask.any():
            raise DataError(
                "no coefficient group is tracked; pass track='all' for a zero model"
            )
        self.group_mask = group_mask
        self.mask = np.repeat(group_mask.reshape(-1), k)
        self.n_state = int(self.mask.sum())
        self.noise_scale = float(noise_scale)
        self.jitter = float(jitter)
        if mean_reversion is not None and transition is not None:
            raise DataError("pass either a transition matrix or mean_reversion")
        if mean_reversion is not None:
            if not 0 < mean_reversion <= 1:
                raise DataError("mean_reversion must lie in (0, 1]")
            transition = mean_reversion * np.eye(self.n_state)
        elif transition is None:
            transition = np.eye(self.n_state)
        transition = np.asarray(transition, dtype=float)
        if transition.shape != (self.n_state, self.n_state):
            raise DataError("transition matrix does not match the tracked state size")
        self._transition = transition
        self._anchor = (
            self._template_flat[self.mask].copy() if mean_reversion is not None else None
        )
        self._process_noise = float(process_noise) * np.eye(self.n_state)
        self._initial_cov = float(initial_cov) * np.eye(self.n_state)
        self._act = activation_matrix(d)

    # -- state construction and views ------------------------------------

    def initial_state(self) -> EkfState:
        return EkfState(
            mean=self._template_flat[self.mask].copy(),
            cov=self._initial_cov.copy(),
            transition=self._transition,
            process_noise=self._process_noise,
            anchor=self._anchor,
        )

    def compact_mean(self, mean) -> CompactParams:
        full = self._template_flat.copy()
        full[self.mask] = mean
        d, _, k = self.template.coefficients.shape
        return CompactParams.from_flat(full, d, k - 1)

    def expand_mean(self, mean) -> np.ndarray:
        return self.compact_mean(mean).expand()

    # -- observation model ------------------------------------------------

    def _cells(self, obs: VisitObservation):
        """Active (child, row) cells in child-major order."""
        cols, rows = np.nonzero(obs.exposure.T > 0)
        return list(zip(cols.tolist(), rows.tolist()))

    def observation_map(self, mean, obs: VisitObservation):
        """Predicted counts, Jacobian rows and observed counts for one visit."""
        d, n_grp, k = self.template.coefficients.shape
        if obs.n_conditions != d:
            raise DataError("observation grid does not match the model")
        z = check_design(obs.z, k - 1)
        tensor = self.expand_mean(mean)
        cells = self._cells(obs)
        predicted = np.zeros(len(cells))
        jac = np.zeros((len(cells), self.n_state))
        observed = np.zeros(len(cells))
        design_full = np.zeros((d, n_grp, k))
        for i, (child, row) in enumerate(cells):
            log_rate = tensor[row, child] @ z
            if log_rate > LOG_RATE_LIMIT:
                raise NumericalError("log-intensity exceeds the overflow guard")
            predicted[i] = obs.exposure[row, child] * np.exp(log_rate)
            design_full[:] = 0.0
            design_full[child] = self._act[child, row][:, None] * z[None, :]
            jac[i] = predicted[i] * design_full.reshape(-1)[self.mask]
            observed[i] = obs.counts[row, child]
        return predicted, jac, observed

    def observation_jacobian(self, mean, obs: VisitObservation) -> np.ndarray:
        """Jacobian of the predicted-count map at ``mean`` (rows = cells)."""
        if not np.any(obs.exposure > 0):
            raise DataError("observation carries no exposure")
        return self.observation_map(mean, obs)[1]

    # -- filter steps -------------------------------------------------------

    def predict_step(self, state: EkfState) -> EkfState:
        return predict_step(state)

    def update_step(self, state: EkfState, obs: VisitObservation) -> EkfState:
        predicted, jac, observed = self.observation_map(state.mean, obs)
        if predicted.size == 0:
            return replace(
                state, jacobian_norm=0.0, innovation_norm=0.0, obs_noise_max=0.0
            )
        noise = self.noise_scale * predicted  # Poisson variance = mean
        s = _symmetrize(jac @ state.cov @ jac.T) + np.diag(noise)
        p_ht = state.cov @ jac.T
        try:
            gain = np.linalg.solve(s, p_ht.T).T
        except np.linalg.LinAlgError:
            try:
                gain = np.linalg.solve(
                    s + self.jitter * np.eye(s.shape[0]), p_ht.T
                ).T
                warnings.warn(
                    "singular innovation covariance; jitter fallback applied",
                    stacklevel=2,
                )
            except np.linalg.LinAlgError as exc:
                raise NumericalError("innovation covariance is singular") from exc
        innovation = observed - predicted
        mean = state.mean + gain @ innovation
        cov = _symmetrize((np.eye(self.n_state) - gain @ jac) @ state.cov)
        return replace(
            state,
            mean=mean,
            cov=cov,
            jacobian_norm=float(np.linalg.norm(jac, 2)),
            innovation_norm=float(np.linalg.norm(innovation)),
            obs_noise_max=float(noise.max()),
        )

    def run(self, visits):
        """Alternate predict/update over time-ordered visits.

        Returns the state list and the expanded tensor list, both including
        the initial entry at index 0.
        """
        state = self.initial_state()
        states = [state]
        tensors = [self.expand_mean(state.mean)]
        for obs in visits:
            state = self.update_step(self.predict_step(state), obs)
            states.append(state)
            tensors.append(self.expand_mean(state.mean))
        return states, tensors


def run_filter(initial: CompactParams, visits, config: FilterConfig | None = None):
    """Filter a visit stream starting from a fitted model.

    Convenience wrapper around :class:`CoefficientFilter`; see
    :class:`FilterConfig` for the knobs.
    """
    config = config or FilterConfig()
    filt = CoefficientFilter(
        initial,
        track=config.track,
        transition=config.transition,
        process_noise=config.process_noise,
        initial_cov=config.initial_cov,
        noise_scale=config.noise_scale,
        jitter=config.jitter,
        mean_reversion=config.mean_reversion,
    )
    return filt.run(visits)


@dataclass(frozen=True)
class TransitionEstimate:
    """Result of :func:`estimate_transition_matrix`."""

    matrix: np.ndarray
    insufficient_history: bool = False
    rank_deficient: bool = False


def estimate_transition_matrix(history, ridge: float = 1e-6) -> TransitionEstimate:
    """Least-squares transition matrix from a sequence of coefficient vectors.

    Solves ``beta_t ~= F beta_{t-1}`` with ridge damping toward the identity,
    so a constant history yields exactly the identity.  Fewer than three
    snapshots fall back to the identity with the ``insufficient_history``
    flag; a rank-deficient history keeps the damped solution and warns.
    """
    history = np.atleast_2d(np.asarray(history, dtype=float))
    if history.shape[0] < 1:
        raise DataError("empty coefficient history")
    n = history.shape[1]
    if history.shape[0] < 3:
        return TransitionEstimate(np.eye(n), insufficient_history=True)
    before = history[:-1].T  # (n, T-1)
    after = history[1:].T
    gram = before @ before.T
    alpha = ridge * (np.trace(gram) / n + 1.0)
    rank_deficient = before.shape[1] < n or bool(
        np.linalg.eigvalsh(gram)[0] < 1e-12 * max(1.0, np.trace(gram) / n)
    )
    if rank_deficient:
        warnings.warn(
            "coefficient history is rank deficient; ridge-damped estimate returned",
            stacklevel=2,
        )
    drift = np.linalg.solve(gram + alpha * np.eye(n), before @ (after - before).T).T
    return TransitionEstimate(np.eye(n) + drift, rank_deficient=rank_deficient)


@dataclass(frozen=True)
class StabilityReport:
    """Empirical check of the bounded-error conditions of the filter."""

    transition_norm_max: float
    jacobian_norm_max: float
    transition_min_singular: float
    process_noise_max: float
    obs_noise_max: float
    error_norms: np.ndarray
    error_max: float
    violated: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violated


def stability_report(
    states, *, error_bound: float = 1e6, noise_bound: float = 1e6
) -> StabilityReport:
    """Diagnose a filtered state sequence against the boundedness conditions:
    bounded transition/observation maps, a nonsingular transition matrix, and
    noise covariances plus empirical errors below the configured bounds.

    The error sequence uses each update's innovation norm; states without an
    update (predict-only) contribute their mean's drift from the start.
    """
    states = list(states)
    if not states:
        raise DataError("no filter states supplied")
    f_norms = [float(np.linalg.norm(s.transition, 2)) for s in states]
    min_singular = min(
        float(np.linalg.svd(s.transition, compute_uv=False)[-1]) for s in states
    )
    jac_norms = [s.jacobian_norm for s in states if s.jacobian_norm is not None]
    noise_max = [s.obs_noise_max for s in states if s.obs_noise_max is not None]
    base = states[0].mean
    errors = np.array(
        [
            s.innovation_norm
            if s.innovation_norm is not None
            else float(np.linalg.norm(s.mean - base))
            for s in states
        ]
    )
    q_max = max(float(np.linalg.eigvalsh(s.process_noise)[-1]) for s in states)
    report = dict(
        transition_norm_max=max(f_norms),
        jacobian_norm_max=max(jac_norms) if jac_norms else 0.0,
        transition_min_singular=min_singular,
        process_noise_max=q_max,
        obs_noise_max=max(noise_max) if noise_max else 0.0,
        error_norms=errors,
        error_max=float(errors.max()),
    )
    violated = []
    if not np.isfinite(report["transition_norm_max"]) or not np.isfinite(
        report["jacobian_norm_max"]
    ):
        violated.append("bounded_maps")
    if min_singular <= 1e-12 * max(1.0, report["transition_norm_max"]):
        violated.append("nonsingular_transition")
    if q_max > noise_bound or report["obs_noise_max"] > noise_bound:
        violated.append("bounded_noise")
    if report["error_max"] > error_bound:
        violated.append("bounded_error")
    return StabilityReport(violated=tuple(violated), **report)


def visit_observations(trajectory: Trajectory, visit_times=None, *, design=None):
    """Slice a trajectory into per-visit exposure/count observations.

    ``visit_times`` are the window right-edges (default: every event time
    after the first, so each recorded event closes a window).  ``design``
    overrides the design vector of every observation; by default each window
    uses the design vector in effect at its start.  Used to feed
    :class:`CoefficientFilter` from event-level or visit-level data.
    """
    events = trajectory.events
    if len(events) < 2:
        return []
    start = events[0].time
    if visit_times is None:
        visit_times = [e.time for e in events[1:]]
    edges = np.asarray(sorted(visit_times), dtype=float)
    if edges.size == 0:
        return []
    if edges[0] <= start or edges[-1] > events[-1].time + 1e-12:
        raise DataError("visit times must lie inside the trajectory's span")
    d = trajectory.n_conditions
    rows = n_tensor_rows(d)
    exposure = [np.zeros((rows, d)) for _ in edges]
    counts = [np.zeros((rows, d)) for _ in edges]
    designs: list[np.ndarray | None] = [None] * len(edges)
    for before, after in zip(events, events[1:]):
        cell_rows = [active_row(before.profile, c) for c in range(d)]
        # split this interval's exposure across the visit windows it overlaps
        left = np.searchsorted(edges, before.time, side="left")
        for w in range(left, len(edges)):
            w_start = start if w == 0 else edges[w - 1]
            lo = max(before.time, w_start)
            hi = min(after.time, edges[w])
            if hi <= lo:
                if edges[w] >= after.time:
                    break
                continue
            if designs[w] is None:
                designs[w] = design if design is not None else before.risk_factors
            for c in range(d):
                exposure[w][cell_rows[c], c] += hi - lo
            if edges[w] >= after.time:
                break
        # the flip at the interval's end lands in the window containing it
        flipped = np.nonzero(before.profile != after.profile)[0]
        if flipped.size:
            w = int(np.searchsorted(edges, after.time, side="left"))
            w = min(w, len(edges) - 1)
            for c in flipped:
                counts[w][cell_rows[c], c] += 1
    observations = []
    for w in range(len(edges)):
        z = designs[w]
        if z is None:
            z = design if design is not None else events[0].risk_factors
        observations.append(VisitObservation(z, exposure[w], counts[w]))
    return observations
