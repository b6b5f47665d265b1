"""Tensor feature extraction and control charting of the coefficient stream.

A multilinear PCA (non-centered, alternating per-mode eigendecompositions)
learns one orthonormal projection per tensor mode from in-control samples.
New tensors are projected onto the learned subspaces; the Frobenius norm of
the reconstruction residual is the monitored statistic.  An exponentially
weighted moving average chart with time-varying limits is calibrated on the
in-control (phase I) residuals and flags sustained departures in phase II; a
multivariate T-squared variant over residual feature vectors sits behind a
mode switch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as sps
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DataError

__all__ = [
    "n_mode_product",
    "multi_mode_product",
    "MultilinearPCA",
    "ChartState",
    "ChartPoint",
    "chart_calibrate",
    "chart_update",
    "control_limits",
    "monitor_stream",
    "EwmaChart",
]


def n_mode_product(tensor, matrix, mode: int) -> np.ndarray:
    """Multiply ``tensor`` along ``mode`` by ``matrix`` (rows index the output)."""
    tensor = np.asarray(tensor, dtype=float)
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape[1] != tensor.shape[mode]:
        raise DataError(
            f"matrix columns ({matrix.shape[1]}) do not match tensor mode "
            f"{mode} ({tensor.shape[mode]})"
        )
    moved = np.tensordot(matrix, tensor, axes=(1, mode))
    return np.moveaxis(moved, 0, mode)


def multi_mode_product(tensor, matrices, transpose=False) -> np.ndarray:
    """Apply one matrix per mode; ``transpose=True`` applies each transposed."""
    out = np.asarray(tensor, dtype=float)
    for mode, matrix in enumerate(matrices):
        out = n_mode_product(out, matrix.T if transpose else matrix, mode)
    return out


def _mode_scatter(samples, mode):
    """Sum over samples of the mode-n unfolding times its transpose."""
    moved = np.moveaxis(samples, mode + 1, 1)
    flat = moved.reshape(samples.shape[0], samples.shape[mode + 1], -1)
    return np.einsum("sij,skj->ik", flat, flat)


def _top_eigvecs(scatter, count):
    values, vectors = np.linalg.eigh(0.5 * (scatter + scatter.T))
    order = np.argsort(values)[::-1]
    return values[order], vectors[:, order[:count]]


class MultilinearPCA(BaseEstimator, TransformerMixin):
    """Per-mode orthogonal projections maximizing captured tensor scatter.

    Data are NOT centered: the projections must reproduce the coefficient
    values themselves, not deviations from their mean.  ``target_dims``
    fixes the per-mode subspace sizes; when None, the smallest dimensions
    capturing at least ``variance_threshold`` of each mode's scatter are
    chosen from the initial eigendecomposition.

    Attributes after fit: ``projections_`` (orthonormal-column matrices),
    ``target_dims_``, ``captured_variance_`` (per-mode fractions),
    ``objective_history_`` (non-decreasing) and ``n_rounds_``.
    """

    def __init__(self, target_dims=None, variance_threshold=0.97, max_rounds=50, tol=1e-8):
        self.target_dims = target_dims
        self.variance_threshold = variance_threshold
        self.max_rounds = max_rounds
        self.tol = tol

    def _objective(self, samples, projections):
        total = 0.0
        for i in range(samples.shape[0]):
            core = multi_mode_product(samples[i], projections, transpose=True)
            total += float((core * core).sum())
        return total

    def fit(self, X, y=None):
        samples = np.asarray(X, dtype=float)
        if samples.ndim < 2 or samples.shape[0] < 1:
            raise DataError("need at least one sample tensor")
        n_modes = samples.ndim - 1
        dims = samples.shape[1:]

        eigvals = []
        projections = []
        for mode in range(n_modes):
            values, _ = _top_eigvecs(_mode_scatter(samples, mode), dims[mode])
            eigvals.append(np.clip(values, 0.0, None))
        if self.target_dims is not None:
            target = tuple(int(p) for p in self.target_dims)
            if len(target) != n_modes:
                raise DataError("target_dims must give one size per tensor mode")
            for mode, p in enumerate(target):
                if not 1 <= p <= dims[mode]:
                    raise DataError(
                        f"target dimension {p} out of range for mode {mode} "
                        f"of size {dims[mode]}"
                    )
        else:
            target = []
            for values in eigvals:
                total = values.sum()
                if total <= 0:
                    target.append(1)
                    continue
                fractions = np.cumsum(values) / total
                target.append(int(np.searchsorted(fractions, self.variance_threshold) + 1))
            target = tuple(min(p, d) for p, d in zip(target, dims))

        for mode in range(n_modes):
            _, vectors = _top_eigvecs(_mode_scatter(samples, mode), target[mode])
            projections.append(vectors)

        history = [self._objective(samples, projections)]
        rounds = 0
        for rounds in range(1, self.max_rounds + 1):
            for mode in range(n_modes):
                partial = samples
                for other in range(n_modes):
                    if other != mode:
                        partial = n_mode_product(
                            partial, projections[other].T, other + 1
                        )
                _, projections[mode] = _top_eigvecs(
                    _mode_scatter(partial, mode), target[mode]
                )
            history.append(self._objective(samples, projections))
            denom = max(abs(history[-1]), 1e-300)
            if abs(history[-1] - history[-2]) / denom < self.tol:
                break

        captured = []
        for mode in range(n_modes):
            partial = samples
            for other in range(n_modes):
                if other != mode:
                    partial = n_mode_product(partial, projections[other].T, other + 1)
            values, _ = _top_eigvecs(_mode_scatter(partial, mode), dims[mode])
            values = np.clip(values, 0.0, None)
            total = values.sum()
            captured.append(
                float(values[: target[mode]].sum() / total) if total > 0 else 1.0
            )

        self.n_modes_ = n_modes
        self.dims_ = dims
        self.target_dims_ = target
        self.projections_ = projections
        self.captured_variance_ = tuple(captured)
        self.objective_history_ = np.asarray(history)
        self.n_rounds_ = rounds
        return self

    def _as_batch(self, X):
        arr = np.asarray(X, dtype=float)
        if arr.ndim == self.n_modes_:
            if arr.shape != self.dims_:
                raise DataError(f"tensor shape {arr.shape} does not match {self.dims_}")
            return arr[None], True
        if arr.ndim == self.n_modes_ + 1:
            if arr.shape[1:] != self.dims_:
                raise DataError(
                    f"sample shape {arr.shape[1:]} does not match {self.dims_}"
                )
            return arr, False
        raise DataError("input must be one tensor or a batch of tensors")

    def transform(self, X):
        """Project onto the learned subspaces; returns the core tensor(s)."""
        check_is_fitted(self, "projections_")
        batch, single = self._as_batch(X)
        cores = np.stack(
            [
                multi_mode_product(batch[i], self.projections_, transpose=True)
                for i in range(batch.shape[0])
            ]
        )
        return cores[0] if single else cores

    def inverse_transform(self, cores):
        cores = np.asarray(cores, dtype=float)
        single = cores.ndim == self.n_modes_
        batch = cores[None] if single else cores
        out = np.stack(
            [
                multi_mode_product(batch[i], self.projections_)
                for i in range(batch.shape[0])
            ]
        )
        return out[0] if single else out

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def reconstruction_error(self, X):
        """Residual tensor(s) and their Frobenius norms."""
        check_is_fitted(self, "projections_")
        batch, single = self._as_batch(X)
        residuals = batch - self.inverse_transform(self.transform(batch))
        norms = np.sqrt((residuals * residuals).reshape(batch.shape[0], -1).sum(axis=1))
        if single:
            return residuals[0], float(norms[0])
        return residuals, norms


# ---------------------------------------------------------------------------
# EWMA / MEWMA charting


@dataclass(frozen=True)
class ChartState:
    """Calibrated chart state; updates return a new state (pure).

    ``smoothed`` accumulates the smoothed deviation from the phase-I center,
    starting at zero.  In scalar mode the plotted statistic is
    ``center + smoothed`` against the time-varying limits; in vector mode it
    is the T-squared of the smoothed deviation against a fixed upper limit.
    ``signal_on`` selects one-sided ("upper", the default for residual-norm
    monitoring) or two-sided signaling.
    """

    kind: str
    smoothing: float
    width: float
    center: float | np.ndarray
    scale: float | None
    covariance: np.ndarray | None
    cov_pinv: np.ndarray | None
    smoothed: float | np.ndarray
    index: int
    n_baseline: int
    signal_on: str
    t2_limit: float | None


def chart_calibrate(
    phase1, smoothing: float = 0.15, width: float = 1.5, *, signal_on: str = "upper"
) -> ChartState:
    """Estimate the chart center and dispersion from in-control samples.

    Scalar inputs calibrate the univariate chart; 2-d inputs (one feature
    vector per row) calibrate the multivariate T-squared variant.  Fewer than
    20 in-control samples trigger a warning; zero dispersion is an error.
    """
    if not 0 < smoothing <= 1:
        raise DataError("smoothing constant must lie in (0, 1]")
    if width <= 0:
        raise DataError("limit width must be positive")
    if signal_on not in ("upper", "both"):
        raise DataError("signal_on must be 'upper' or 'both'")
    values = np.asarray(phase1, dtype=float)
    if values.size == 0:
        raise DataError("phase-I sample is empty")
    if values.shape[0] < 20:
        warnings.warn(
            f"only {values.shape[0]} phase-I samples; >= 20 are recommended",
            stacklevel=2,
        )
    if values.ndim == 1:
        sigma = float(np.std(values, ddof=1)) if values.shape[0] > 1 else 0.0
        if sigma <= 0:
            raise DataError("phase-I sample has zero variance")
        return ChartState(
            kind="scalar",
            smoothing=smoothing,
            width=width,
            center=float(np.mean(values)),
            scale=sigma,
            covariance=None,
            cov_pinv=None,
            smoothed=0.0,
            index=0,
            n_baseline=values.shape[0],
            signal_on=signal_on,
            t2_limit=None,
        )
    if values.ndim != 2:
        raise DataError("phase-I samples must be scalars or feature vectors")
    center = values.mean(axis=0)
    cov = np.cov(values, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    if not np.any(cov):
        raise DataError("phase-I sample has zero variance")
    rank = np.linalg.matrix_rank(cov)
    if rank < cov.shape[0]:
        warnings.warn(
            "singular phase-I covariance; pseudo-inverse used", stacklevel=2
        )
    # matches the two-sided coverage of a width-L univariate band
    coverage = 2.0 * sps.norm.cdf(width) - 1.0
    return ChartState(
        kind="vector",
        smoothing=smoothing,
        width=width,
        center=center,
        scale=None,
        covariance=cov,
        cov_pinv=np.linalg.pinv(cov, hermitian=True),
        smoothed=np.zeros_like(center),
        index=0,
        n_baseline=values.shape[0],
        signal_on=signal_on,
        t2_limit=float(sps.chi2.ppf(coverage, df=rank)),
    )


def _bracket(smoothing: float, index: int) -> float:
    return (
        smoothing / (2.0 - smoothing) * (1.0 - (1.0 - smoothing) ** (2 * index))
    )


def control_limits(state: ChartState, index: int | None = None):
    """(UCL, CL, LCL) at an observation index (defaults to the current one)."""
    i = state.index if index is None else index
    i = max(i, 1)
    if state.kind == "vector":
        return state.t2_limit, 0.0, 0.0
    half = state.width * state.scale * np.sqrt(_bracket(state.smoothing, i))
    return state.center + half, state.center, state.center - half


def chart_update(state: ChartState, x):
    """Fold one observation into the chart.

    Returns ``(new_state, statistic, signal)``.  Signals never halt the
    chart; subsequent points keep being evaluated.
    """
    lam = state.smoothing
    if state.kind == "scalar":
        x = float(x)
        smoothed = lam * (x - state.center) + (1.0 - lam) * state.smoothed
        new = replace(state, smoothed=smoothed, index=state.index + 1)
        statistic = state.center + smoothed
        ucl, _, lcl = control_limits(new)
        signal = statistic > ucl or (state.signal_on == "both" and statistic < lcl)
        return new, float(statistic), bool(signal)
    x = np.asarray(x, dtype=float)
    if x.shape != np.shape(state.center):
        raise DataError("feature vector does not match the calibrated dimension")
    smoothed = lam * (x - state.center) + (1.0 - lam) * state.smoothed
    new = replace(state, smoothed=smoothed, index=state.index + 1)
    scale = _bracket(lam, new.index)
    t2 = float(smoothed @ state.cov_pinv @ smoothed) / scale
    return new, t2, bool(t2 > state.t2_limit)


@dataclass(frozen=True)
class ChartPoint:
    """One monitored observation of a chart series."""

    index: int
    time: float
    statistic: float
    ucl: float
    lcl: float
    signal: bool


def monitor_stream(model: MultilinearPCA, chart: ChartState, tensors, times=None):
    """Chart the reconstruction errors of a tensor stream.

    In scalar mode each tensor contributes its residual norm; in vector mode,
    the flattened residual tensor.  ``times`` labels the points (defaults to
    the 1-based index).  Returns the list of :class:`ChartPoint`; the stream
    is evaluated in full even after signals.
    """
    points = []
    state = chart
    for k, tensor in enumerate(tensors):
        residual, norm = model.reconstruction_error(tensor)
        feature = norm if state.kind == "scalar" else residual.reshape(-1)
        state, statistic, signal = chart_update(state, feature)
        ucl, _, lcl = control_limits(state)
        points.append(
            ChartPoint(
                index=state.index,
                time=float(times[k]) if times is not None else float(state.index),
                statistic=statistic,
                ucl=float(ucl),
                lcl=float(lcl),
                signal=signal,
            )
        )
    return points


class EwmaChart(BaseEstimator):
    """Thin estimator wrapper: fit on phase-I values, score/flag a stream."""

    def __init__(self, smoothing=0.15, width=1.5, signal_on="upper"):
        self.smoothing = smoothing
        self.width = width
        self.signal_on = signal_on

    def fit(self, X, y=None):
        self.state_ = chart_calibrate(
            X, self.smoothing, self.width, signal_on=self.signal_on
        )
        return self

    def score_samples(self, X):
        """Chart statistic per observation, in order."""
        check_is_fitted(self, "state_")
        state = self.state_
        stats_out = []
        for x in X:
            state, statistic, _ = chart_update(state, x)
            stats_out.append(statistic)
        return np.asarray(stats_out)

    def predict(self, X):
        """Boolean signal per observation, in order."""
        check_is_fitted(self, "state_")
        state = self.state_
        signals = []
        for x in X:
            state, _, signal = chart_update(state, x)
            signals.append(signal)
        return np.asarray(signals, dtype=bool)
