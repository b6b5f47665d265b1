"""Continuous-time condition network: intensities, sampling, statistics.

Each condition is a binary variable whose exit rate from its current state
depends on the states of the other conditions (its candidate parents) and on
exogenous risk factors through a log-linear (Poisson regression) link.  This
module evaluates those intensities, samples exact trajectories with competing
exponential clocks, and reduces trajectories to the exposure/count sufficient
statistics that fully determine the likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import LOG_RATE_LIMIT, as_float_array, check_design, check_profile
from .errors import DataError, NumericalError
from .params import (
    active_row,
    check_tensor,
    n_tensor_rows,
    parent_config,
    row_index,
)

__all__ = [
    "FactorSchema",
    "reference_factor_schema",
    "REFERENCE_CONDITIONS",
    "Event",
    "Trajectory",
    "SufficientStats",
    "design_vector",
    "intensity_matrix",
    "sojourn_distribution",
    "emergence_probability",
    "exit_rates",
    "sample_trajectory",
    "sufficient_statistics",
    "risk_strata",
]

REFERENCE_CONDITIONS = (
    "diabetes",
    "obesity",
    "hypertension",
    "hyperlipidemia",
    "cognitive_impairment",
)


def design_vector(factors) -> np.ndarray:
    """Prepend the fixed intercept entry to a vector of encoded covariates."""
    factors = as_float_array(factors, "risk factors")
    if factors.ndim != 1:
        raise DataError("risk factors must form a 1-d vector")
    return np.concatenate(([1.0], factors))


@dataclass(frozen=True)
class FactorSchema:
    """Named risk factors and the encoding that turns raw values into a design vector.

    Binary factors pass through as 0/1; ordinal factors (band-coded integers)
    are standardized as ``(value - offset) / scale``.  The constants travel
    with fitted models so every consumer encodes identically.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    offsets: tuple[float, ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.kinds) == len(self.offsets) == len(self.scales) == n):
            raise DataError("factor schema fields must have equal lengths")
        for kind in self.kinds:
            if kind not in ("binary", "ordinal"):
                raise DataError(f"unknown factor kind {kind!r}")
        if any(s <= 0 for s in self.scales):
            raise DataError("factor scales must be positive")

    @property
    def n_factors(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown risk factor {name!r}") from None

    def encode(self, raw) -> np.ndarray:
        """Encode raw factor values (vector or name->value mapping) into a
        design vector with the leading intercept entry."""
        if isinstance(raw, dict):
            missing = [n for n in self.names if n not in raw]
            if missing:
                raise DataError(f"missing risk factors: {', '.join(missing)}")
            raw = [raw[n] for n in self.names]
        values = as_float_array(raw, "risk factors")
        if values.shape != (self.n_factors,):
            raise DataError(
                f"expected {self.n_factors} risk factors, got {values.shape[0]}"
            )
        encoded = (values - np.asarray(self.offsets)) / np.asarray(self.scales)
        return np.concatenate(([1.0], encoded))

    def decode(self, z) -> np.ndarray:
        """Invert :meth:`encode` (drops the intercept entry)."""
        z = check_design(z, self.n_factors)
        return z[1:] * np.asarray(self.scales) + np.asarray(self.offsets)

    @classmethod
    def from_values(cls, names, values) -> "FactorSchema":
        """Derive encoding constants from observed raw values (one column per
        factor): binaries pass through, anything else is standardized."""
        values = np.asarray(values, dtype=float)
        kinds, offsets, scales = [], [], []
        for j, _ in enumerate(names):
            col = values[:, j]
            if np.isin(col, (0.0, 1.0)).all():
                kinds.append("binary")
                offsets.append(0.0)
                scales.append(1.0)
            else:
                kinds.append("ordinal")
                offsets.append(float(np.mean(col)))
                scales.append(float(max(np.std(col), 1e-12)))
        return cls(tuple(names), tuple(kinds), tuple(offsets), tuple(scales))


def reference_factor_schema() -> FactorSchema:
    """Default 7-factor schema: three demographic bands plus four lifestyle
    binaries.  Band constants are fixed population values, documented in the
    format guide."""
    return FactorSchema(
        names=("age_band", "gender", "education", "diet", "exercise", "smoke", "drink"),
        kinds=("ordinal", "binary", "ordinal", "binary", "binary", "binary", "binary"),
        offsets=(5.5, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0),
        scales=(3.0, 1.0, 1.5, 1.0, 1.0, 1.0, 1.0),
    )


@dataclass(frozen=True)
class Event:
    """One timestamped observation: condition profile + design vector."""

    time: float
    profile: np.ndarray
    risk_factors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "profile", check_profile(self.profile))
        object.__setattr__(self, "risk_factors", check_design(self.risk_factors))
        self.profile.setflags(write=False)
        self.risk_factors.setflags(write=False)


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered events of one patient.

    Times must be strictly increasing.  Simulator output flips at most one
    condition per event; ingested visit data may flip several (the implied
    transitions are attributed to the interval's starting configuration).
    """

    patient_id: str
    events: tuple[Event, ...]

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        times = [e.time for e in self.events]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise DataError(
                f"event times of patient {self.patient_id!r} must be strictly increasing"
            )
        lengths = {e.profile.shape[0] for e in self.events}
        if len(lengths) > 1:
            raise DataError("all events must share the same condition count")

    @property
    def n_conditions(self) -> int:
        return self.events[0].profile.shape[0]

    @property
    def span(self) -> float:
        return self.events[-1].time - self.events[0].time


def _log_rate(tensor, z, row, child) -> float:
    value = float(tensor[row, child] @ z)
    if value > LOG_RATE_LIMIT:
        raise NumericalError(
            f"log-intensity {value:.1f} exceeds {LOG_RATE_LIMIT}; exp() would overflow"
        )
    return value


def intensity_matrix(tensor, z, child: int, config: int) -> np.ndarray:
    """2x2 conditional intensity matrix of one child under a parent configuration.

    Off-diagonal entries are the log-linear transition rates; each diagonal
    entry balances its row to zero, which for binary states makes the exit
    rate equal to the single outgoing rate.
    """
    tensor = check_tensor(tensor)
    d = tensor.shape[1]
    z = check_design(z, tensor.shape[2] - 1)
    if not 0 <= child < d:
        raise DataError(f"child index {child} out of range")
    q01 = np.exp(_log_rate(tensor, z, row_index(0, config, d), child))
    q10 = np.exp(_log_rate(tensor, z, row_index(1, config, d), child))
    return np.array([[-q01, q01], [q10, -q10]])


def sojourn_distribution(rate, t):
    """Density and distribution function of the sojourn time at exit rate ``rate``.

    Returns ``(pdf, cdf)`` evaluated at ``t`` (scalar or array, years).
    """
    rate = float(rate)
    if rate <= 0:
        raise DataError("sojourn rate must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DataError("sojourn time must be non-negative")
    decay = np.exp(-rate * t)
    pdf = rate * decay
    cdf = 1.0 - decay
    if t.ndim == 0:
        return float(pdf), float(cdf)
    return pdf, cdf


def emergence_probability(tensor, z, profile, child: int, horizon: float) -> float:
    """Probability that an inactive condition emerges within ``horizon`` years,
    holding the parents and risk factors fixed."""
    tensor = check_tensor(tensor)
    profile = check_profile(profile, tensor.shape[1])
    if horizon < 0:
        raise DataError("horizon must be non-negative")
    if profile[child] != 0:
        raise DataError(f"condition {child} is already active")
    z = check_design(z, tensor.shape[2] - 1)
    row = row_index(0, parent_config(profile, child), tensor.shape[1])
    rate = np.exp(_log_rate(tensor, z, row, child))
    return float(1.0 - np.exp(-rate * horizon))


def exit_rates(tensor, z, profile) -> np.ndarray:
    """Current exit rate of every condition from its own state."""
    tensor = check_tensor(tensor)
    profile = check_profile(profile, tensor.shape[1])
    z = check_design(z, tensor.shape[2] - 1)
    log_rates = np.array(
        [tensor[active_row(profile, c), c] @ z for c in range(tensor.shape[1])]
    )
    if np.any(log_rates > LOG_RATE_LIMIT):
        raise NumericalError("log-intensity exceeds the overflow guard")
    return np.exp(log_rates)


def sample_trajectory(
    tensor, z, initial, horizon: float, seed, *, start_time=0.0, patient_id="sim"
) -> Trajectory:
    """Sample one exact trajectory over ``[start_time, start_time + horizon]``.

    Every condition runs a competing exponential clock at its current exit
    rate; clocks are re-drawn after each event, which the memoryless property
    makes exact.  The first event records the initial state and a final
    event closes the observation window (no condition flips there).
    Deterministic for a fixed ``seed``.
    """
    if horizon <= 0:
        raise DataError("horizon must be positive")
    tensor = check_tensor(tensor)
    rng = np.random.default_rng(seed)
    profile = check_profile(initial, tensor.shape[1]).copy()
    z = check_design(z, tensor.shape[2] - 1)

    end = start_time + horizon
    t = start_time
    events = [Event(t, profile.copy(), z)]
    while True:
        rates = exit_rates(tensor, z, profile)
        # E/q ~ Exp(q); dividing keeps the draw count fixed even when a rate
        # underflows to zero (the clock then simply never fires).
        with np.errstate(divide="ignore"):
            waits = rng.standard_exponential(rates.shape[0]) / rates
        winner = int(np.argmin(waits))
        t_next = t + waits[winner]
        if t_next >= end:
            break
        profile[winner] ^= 1
        events.append(Event(t_next, profile.copy(), z))
        t = t_next
    events.append(Event(end, profile.copy(), z))
    return Trajectory(patient_id, tuple(events))


@dataclass(frozen=True)
class SufficientStats:
    """Exposure times and exit counts per (row, child) cell.

    ``exposure[r, c]`` is the time child ``c`` spent occupying tensor row
    ``r``; ``counts[r, c]`` is the number of times it exited that cell.
    """

    exposure: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        exposure = np.asarray(self.exposure, dtype=float)
        counts = np.asarray(self.counts, dtype=float)
        if exposure.shape != counts.shape or exposure.ndim != 2:
            raise DataError("exposure and counts must share a 2-d shape")
        d = exposure.shape[1]
        if exposure.shape[0] != n_tensor_rows(d):
            raise DataError("sufficient statistics rows do not match 2**D")
        if np.any(exposure < 0) or np.any(counts < 0):
            raise DataError("exposure and counts must be non-negative")
        if np.any(counts[exposure == 0] > 0):
            raise DataError("counts require positive exposure")
        object.__setattr__(self, "exposure", exposure)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, n_conditions: int) -> "SufficientStats":
        shape = (n_tensor_rows(n_conditions), n_conditions)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def n_conditions(self) -> int:
        return self.exposure.shape[1]

    def cell(self, child: int, own_state: int, config: int) -> tuple[float, float]:
        """(exposure, count) for one (child, own state, parent config) cell."""
        r = row_index(own_state, config, self.n_conditions)
        return float(self.exposure[r, child]), float(self.counts[r, child])

    def total_exposure(self) -> np.ndarray:
        """Observed time per child (equal across children by construction)."""
        return self.exposure.sum(axis=0)

    @property
    def n_transitions(self) -> float:
        return float(self.counts.sum())


def _accumulate_events(events, exposure, counts) -> None:
    """Add one trajectory's intervals and transitions to (exposure, counts)."""
    d = events[0].profile.shape[0]
    for before, after in zip(events, events[1:]):
        dt = after.time - before.time
        if dt <= 0:
            raise DataError("decreasing timestamps in trajectory")
        rows = [active_row(before.profile, c) for c in range(d)]
        for c in range(d):
            exposure[rows[c], c] += dt
        flipped = np.nonzero(before.profile != after.profile)[0]
        for c in flipped:
            counts[rows[c], c] += 1


def sufficient_statistics(trajectories, n_conditions=None) -> SufficientStats:
    """Pool exposure and exit counts over a set of trajectories.

    Parent configurations are read from the other conditions at each
    interval's start; a transition observed at the interval's end is counted
    against that starting cell.  ``n_conditions`` is only required when the
    input is empty (all-zero statistics are returned then).
    """
    trajectories = list(trajectories)
    if not trajectories:
        if n_conditions is None:
            raise DataError("empty input requires an explicit condition count")
        return SufficientStats.zeros(n_conditions)
    d = trajectories[0].n_conditions
    if n_conditions is not None and d != n_conditions:
        raise DataError("trajectories do not match the requested condition count")
    rows = n_tensor_rows(d)
    exposure = np.zeros((rows, d))
    counts = np.zeros((rows, d))
    for traj in trajectories:
        if traj.n_conditions != d:
            raise DataError("trajectories must share the condition count")
        _accumulate_events(traj.events, exposure, counts)
    return SufficientStats(exposure, counts)


def risk_strata(trajectories) -> list[tuple[np.ndarray, SufficientStats]]:
    """Group interval statistics by identical design vectors.

    The likelihood depends on the data only through these per-stratum
    sufficient statistics; intervals inherit the design vector recorded at
    their starting event.
    """
    trajectories = list(trajectories)
    if not trajectories:
        return []
    d = trajectories[0].n_conditions
    buckets: dict[bytes, list] = {}
    order: list[bytes] = []
    for traj in trajectories:
        if traj.n_conditions != d:
            raise DataError("trajectories must share the condition count")
        for before, after in zip(traj.events, traj.events[1:]):
            key = before.risk_factors.tobytes()
            if key not in buckets:
                rows = n_tensor_rows(d)
                buckets[key] = [
                    before.risk_factors.copy(),
                    np.zeros((rows, d)),
                    np.zeros((rows, d)),
                ]
                order.append(key)
            _, exposure, counts = buckets[key]
            _accumulate_events((before, after), exposure, counts)
    return [
        (buckets[k][0], SufficientStats(buckets[k][1], buckets[k][2])) for k in order
    ]
