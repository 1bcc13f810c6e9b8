"""
Reciprocal MIMO channels for single- and multi-cell uplink/downlink.

Users are indexed globally: user ``u`` belongs to cell ``u // K`` and is the
``u % K``-th user of that cell, where ``K`` is the number of users per cell.
Only uplink matrices are stored. The downlink channel from a BTS to a user
is always the conjugate transpose of the corresponding uplink matrix.
"""

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

__all__ = ["TopologySpec", "ChannelSet", "sample_channels",
           "effective_channel"]


def _per_user(value, n_users, n_per_cell, name, cast):
    """Expand a scalar / per-cell / per-user value into a per-user tuple."""
    if np.isscalar(value):
        return (cast(value),) * n_users
    values = tuple(cast(x) for x in value)
    if len(values) == n_per_cell:
        return values * (n_users // n_per_cell)
    if len(values) == n_users:
        return values
    raise ConfigurationError(
        f"{name} must be a scalar or have length {n_per_cell} or {n_users},"
        f" got {len(values)}")


@dataclass(frozen=True)
class TopologySpec:
    """
    Dimensions, noise levels and power budgets of a cellular topology.

    Scalar ``user_antennas``, ``user_noise_vars`` and ``user_powers`` are
    broadcast to every user; sequences may be given per user of one cell
    (repeated across cells) or per global user. ``cross_gain`` is either a
    scalar applied to every inter-cell link or a full ``num_cells x
    num_cells`` amplitude matrix whose diagonal must be one. ``bts_power``
    defaults to the sum of one cell's user powers.
    """
    users_per_cell: int
    bts_antennas: int
    user_antennas: object = 1
    num_cells: int = 1
    cross_gain: object = 1.0
    uplink_noise_var: float = 1.0
    user_noise_vars: object = 1.0
    user_powers: object = 1.0
    bts_power: object = None

    def __post_init__(self):
        for name in ("users_per_cell", "bts_antennas", "num_cells"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
            object.__setattr__(self, name, int(value))
        K, C = self.users_per_cell, self.num_cells
        U = K * C
        antennas = _per_user(self.user_antennas, U, K, "user_antennas", int)
        if min(antennas) < 1:
            raise ConfigurationError("user_antennas must be positive")
        object.__setattr__(self, "user_antennas", antennas)
        for name in ("user_noise_vars", "user_powers"):
            values = _per_user(getattr(self, name), U, K, name, float)
            if not all(x > 0 and np.isfinite(x) for x in values):
                raise ConfigurationError(f"{name} must be strictly positive")
            object.__setattr__(self, name, values)
        if not (self.uplink_noise_var > 0 and np.isfinite(self.uplink_noise_var)):
            raise ConfigurationError("uplink_noise_var must be strictly positive")
        object.__setattr__(self, "uplink_noise_var", float(self.uplink_noise_var))

        gain = np.asarray(self.cross_gain, dtype=float)
        if gain.ndim == 0:
            gain = np.full((C, C), float(gain))
            np.fill_diagonal(gain, 1.0)
        if gain.shape != (C, C):
            raise ConfigurationError("cross_gain must be a scalar or C x C")
        if np.any(gain < 0) or not np.allclose(np.diag(gain), 1.0):
            raise ConfigurationError(
                "cross_gain must be nonnegative with unit diagonal")
        object.__setattr__(self, "cross_gain",
                           tuple(tuple(float(x) for x in row) for row in gain))

        if self.bts_power is None:
            power = sum(self.user_powers[:K])
        else:
            power = float(self.bts_power)
        if not power > 0:
            raise ConfigurationError("bts_power must be strictly positive")
        object.__setattr__(self, "bts_power", power)

    @property
    def num_users(self):
        return self.users_per_cell * self.num_cells

    def cell_of(self, u):
        return u // self.users_per_cell

    def users_of(self, cell):
        K = self.users_per_cell
        return range(cell * K, (cell + 1) * K)

    def with_noise(self, uplink_noise_var, user_noise_vars=None):
        """Return a copy with new noise levels (user noise defaults to uplink)."""
        if user_noise_vars is None:
            user_noise_vars = uplink_noise_var
        return replace(self, uplink_noise_var=uplink_noise_var,
                       user_noise_vars=user_noise_vars)

    @classmethod
    def from_dict(cls, data):
        """Build from a JSON-style mapping; unknown keys are rejected."""
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"unknown topology keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return {
            "num_cells": self.num_cells,
            "users_per_cell": self.users_per_cell,
            "bts_antennas": self.bts_antennas,
            "user_antennas": list(self.user_antennas),
            "cross_gain": [list(row) for row in self.cross_gain],
            "uplink_noise_var": self.uplink_noise_var,
            "user_noise_vars": list(self.user_noise_vars),
            "user_powers": list(self.user_powers),
            "bts_power": self.bts_power,
        }


@dataclass(frozen=True)
class ChannelSet:
    """
    Uplink channel matrices of a topology.

    ``H[c_rx][c_tx][k]`` is the ``N x N_k`` matrix from user ``k`` of cell
    ``c_tx`` to the BTS of cell ``c_rx``. The arrays are marked read-only so
    a ChannelSet can be shared between workers.
    """
    spec: TopologySpec
    H: tuple
    rng_seed: int = field(default=0)

    def __post_init__(self):
        spec = self.spec
        C, K, N = spec.num_cells, spec.users_per_cell, spec.bts_antennas
        if len(self.H) != C or any(len(row) != C for row in self.H):
            raise ShapeError("H must be indexed [c_rx][c_tx][k] with C cells")
        frozen = []
        for c_rx in range(C):
            row = []
            for c_tx in range(C):
                links = self.H[c_rx][c_tx]
                if len(links) != K:
                    raise ShapeError(f"expected {K} users per cell")
                mats = []
                for k, mat in enumerate(links):
                    mat = np.array(mat, dtype=complex)
                    n_k = spec.user_antennas[c_tx * K + k]
                    if mat.shape != (N, n_k):
                        raise ShapeError(
                            f"H[{c_rx}][{c_tx}][{k}] has shape {mat.shape},"
                            f" expected {(N, n_k)}")
                    if not np.all(np.isfinite(mat)):
                        raise ShapeError("channel entries must be finite")
                    mat.flags.writeable = False
                    mats.append(mat)
                row.append(tuple(mats))
            frozen.append(tuple(row))
        object.__setattr__(self, "H", tuple(frozen))

    @property
    def num_cells(self):
        return self.spec.num_cells

    @property
    def num_users(self):
        return self.spec.num_users

    def link(self, c_rx, u):
        """Uplink matrix from global user ``u`` to the BTS of ``c_rx``."""
        K = self.spec.users_per_cell
        return self.H[c_rx][u // K][u % K]

    def direct(self, u):
        """Uplink matrix from user ``u`` to its own BTS."""
        return self.link(self.spec.cell_of(u), u)

    def with_noise(self, uplink_noise_var, user_noise_vars=None):
        """Same matrices, different noise levels."""
        return ChannelSet(self.spec.with_noise(uplink_noise_var,
                                               user_noise_vars),
                          self.H, self.rng_seed)

    def subset(self, users):
        """Single-cell ChannelSet restricted to the given users of cell 0."""
        if self.num_cells != 1:
            raise ConfigurationError("subset() needs a single-cell topology")
        users = list(users)
        spec = self.spec
        sub = replace(
            spec, users_per_cell=len(users),
            user_antennas=[spec.user_antennas[u] for u in users],
            user_noise_vars=[spec.user_noise_vars[u] for u in users],
            user_powers=[spec.user_powers[u] for u in users],
            bts_power=spec.bts_power)
        return ChannelSet(sub, ((tuple(self.H[0][0][u] for u in users),),),
                          self.rng_seed)


def sample_channels(spec: TopologySpec, seed: int) -> ChannelSet:
    """
    Draw i.i.d. unit-variance CSCG channels, scaled by the cross gains.

    Each link has its own generator keyed by ``(seed, c_rx, c_tx, k)``,
    so a given link is reproducible regardless of the topology around it.

    Parameters
    ----------
    spec : TopologySpec
    seed : int
        Nonnegative 64-bit integer.

    Returns
    -------
    ChannelSet
    """
    if not isinstance(spec, TopologySpec):
        raise ConfigurationError("spec must be a TopologySpec")
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ConfigurationError("seed must be a nonnegative 64-bit integer")
    C, K, N = spec.num_cells, spec.users_per_cell, spec.bts_antennas
    H = []
    for c_rx in range(C):
        row = []
        for c_tx in range(C):
            gain = spec.cross_gain[c_rx][c_tx]
            mats = []
            for k in range(K):
                n_k = spec.user_antennas[c_tx * K + k]
                rng = np.random.default_rng([seed, c_rx, c_tx, k])
                z = rng.standard_normal((N, n_k, 2))
                mats.append(gain * (z[..., 0] + 1j * z[..., 1]) / np.sqrt(2))
            row.append(tuple(mats))
        H.append(tuple(row))
    return ChannelSet(spec, tuple(H), seed)


def effective_channel(channels: ChannelSet, v_bank: Sequence,
                      cell: int = 0) -> np.ndarray:
    """
    Composite ``N x K`` matrix whose k-th column is ``H_k v_k``.

    Only the users of ``cell`` and their links to their own BTS are used.
    """
    spec = channels.spec
    users = spec.users_of(cell)
    if len(v_bank) not in (spec.users_per_cell, spec.num_users):
        raise ShapeError("v_bank must hold one precoder per user")
    offset = 0 if len(v_bank) == spec.users_per_cell else users.start
    cols = []
    for u in users:
        v = np.asarray(v_bank[u - offset])
        if v.shape != (spec.user_antennas[u],):
            raise ShapeError(
                f"precoder {u} has shape {v.shape}, expected "
                f"{(spec.user_antennas[u],)}")
        cols.append(channels.link(cell, u) @ v)
    return np.stack(cols, axis=1)
