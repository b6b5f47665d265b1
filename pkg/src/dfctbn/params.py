"""Coefficient layout shared by the learner, the filter, and the monitor.

Every (child condition, own state, parent configuration) cell of the network
carries one Poisson-regression coefficient vector of length ``n_factors + 1``
(intercept first).  Two equivalent views are used throughout:

* the compact, edge-grouped form: per child, a baseline group, an own-state
  group, and one group per candidate parent.  Zeroing a parent group removes
  that edge from the network.
* the expanded 3-mode tensor (rows x children x coefficients), where a row
  encodes one (own state, parent configuration) cell.  The tensor is what the
  sampler evaluates and what the control chart monitors.

Row order is lexicographic with the own-state bit leading and the
lowest-numbered parent as the most significant configuration bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DataError

GROUP_BASELINE = 0
GROUP_OWN_STATE = 1
FIRST_PARENT_GROUP = 2


def n_parent_configs(n_conditions: int) -> int:
    return 1 << (n_conditions - 1)


def n_tensor_rows(n_conditions: int) -> int:
    return 1 << n_conditions


def n_groups(n_conditions: int) -> int:
    return n_conditions + 1


def row_index(own_state: int, parent_config: int, n_conditions: int) -> int:
    """Tensor row for one (own state, parent configuration) cell."""
    half = n_parent_configs(n_conditions)
    if not 0 <= parent_config < half:
        raise DataError(f"parent configuration {parent_config} out of range")
    if own_state not in (0, 1):
        raise DataError("own state must be 0 or 1")
    return own_state * half + parent_config


def row_components(row: int, n_conditions: int) -> tuple[int, int]:
    """Inverse of :func:`row_index`: returns (own_state, parent_config)."""
    half = n_parent_configs(n_conditions)
    if not 0 <= row < 2 * half:
        raise DataError(f"row {row} out of range")
    return row // half, row % half


def parents_of(child: int, n_conditions: int) -> tuple[int, ...]:
    """Candidate parents of a child: all other conditions, ascending."""
    return tuple(i for i in range(n_conditions) if i != child)


def parent_config(profile, child: int) -> int:
    """Configuration index of a child's parents under a condition profile.

    The lowest-numbered parent occupies the most significant bit, so
    configuration indices sort lexicographically in the parents' states.
    """
    profile = np.asarray(profile)
    d = profile.shape[0]
    config = 0
    for k, p in enumerate(parents_of(child, d)):
        config |= int(profile[p]) << (d - 2 - k)
    return config


def active_row(profile, child: int) -> int:
    """Tensor row occupied by ``child`` under the given profile."""
    d = np.asarray(profile).shape[0]
    return row_index(int(profile[child]), parent_config(profile, child), d)


@lru_cache(maxsize=8)
def activation_matrix(n_conditions: int) -> np.ndarray:
    """Group activations per (child, row): shape (D, 2**D, D+1), entries 0/1.

    ``act[c, r, 0] = 1`` always (baseline), ``act[c, r, 1]`` is the own-state
    bit of row ``r``, and slot ``2 + k`` is the state of the k-th candidate
    parent encoded in the row.
    """
    d = n_conditions
    rows = n_tensor_rows(d)
    act = np.zeros((d, rows, n_groups(d)))
    act[:, :, GROUP_BASELINE] = 1.0
    for c in range(d):
        for r in range(rows):
            own, config = row_components(r, d)
            act[c, r, GROUP_OWN_STATE] = own
            for k in range(d - 1):
                act[c, r, FIRST_PARENT_GROUP + k] = (config >> (d - 2 - k)) & 1
    act.setflags(write=False)
    return act


@dataclass(frozen=True)
class CompactParams:
    """Edge-grouped regression coefficients for the whole network.

    ``coefficients`` has shape (D, D+1, m+1): child x group x coefficient,
    with group slots [baseline, own-state, parent_0, parent_1, ...] where
    parents are the other conditions in ascending order.
    """

    coefficients: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coefficients, dtype=float)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[0] + 1:
            raise DataError(
                "coefficients must have shape (D, D+1, m+1); got "
                f"{arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("coefficients must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "coefficients", arr)

    @property
    def n_conditions(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_factors(self) -> int:
        return self.coefficients.shape[2] - 1

    @classmethod
    def zeros(cls, n_conditions: int, n_factors: int) -> "CompactParams":
        return cls(np.zeros((n_conditions, n_conditions + 1, n_factors + 1)))

    @classmethod
    def from_flat(cls, vector, n_conditions: int, n_factors: int) -> "CompactParams":
        shape = (n_conditions, n_conditions + 1, n_factors + 1)
        return cls(np.asarray(vector, dtype=float).reshape(shape))

    def flatten(self) -> np.ndarray:
        return self.coefficients.reshape(-1).copy()

    def group(self, child: int, slot: int) -> np.ndarray:
        return self.coefficients[child, slot]

    def parent_slot(self, child: int, parent: int) -> int:
        """Group slot of ``parent`` within ``child``'s coefficient block."""
        if parent == child:
            raise DataError("a condition is not a candidate parent of itself")
        return FIRST_PARENT_GROUP + parents_of(child, self.n_conditions).index(parent)

    def slot_parent(self, child: int, slot: int) -> int:
        return parents_of(child, self.n_conditions)[slot - FIRST_PARENT_GROUP]

    def edge_norms(self) -> np.ndarray:
        """L2 norms of each parent group: ``norms[parent, child]``."""
        d = self.n_conditions
        norms = np.zeros((d, d))
        for child in range(d):
            for k, parent in enumerate(parents_of(child, d)):
                norms[parent, child] = np.linalg.norm(
                    self.coefficients[child, FIRST_PARENT_GROUP + k]
                )
        return norms

    def expand(self) -> np.ndarray:
        """Expanded coefficient tensor of shape (2**D, D, m+1).

        The slice ``tensor[r, c]`` is the additive combination of ``c``'s
        baseline group, its own-state group when the row's own bit is set,
        and each parent group whose bit is set in the row.
        """
        act = activation_matrix(self.n_conditions)
        return np.einsum("crg,cgk->rck", act, self.coefficients)


def check_tensor(tensor, n_conditions=None, n_coeffs=None) -> np.ndarray:
    """Validate an expanded coefficient tensor (rows x children x coeffs)."""
    arr = np.asarray(tensor, dtype=float)
    if arr.ndim != 3:
        raise DataError("coefficient tensor must be 3-dimensional")
    rows, d, k = arr.shape
    if rows != n_tensor_rows(d):
        raise DataError(
            f"tensor has {rows} rows but {n_tensor_rows(d)} are required for "
            f"{d} conditions"
        )
    if n_conditions is not None and d != n_conditions:
        raise DataError(f"tensor is for {d} conditions, expected {n_conditions}")
    if n_coeffs is not None and k != n_coeffs:
        raise DataError(f"tensor carries {k} coefficients, expected {n_coeffs}")
    if not np.all(np.isfinite(arr)):
        raise DataError("coefficient tensor must be finite")
    return arr
