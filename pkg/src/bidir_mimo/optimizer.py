"""
Full-CSI iterative optimizers.

One iteration is one receive-filter update followed by one transmit-filter
update (a "forward-backward iteration"). Trajectories record the objective
after every half-step.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import ConfigurationError
from .mmse_core import (Direction, FilterBank, Kind, as_kind, bias_factors,
                        downlink_rx_update, downlink_tx_update,
                        feedback_matrix, uplink_rx_update, uplink_tx_update)
from .objectives import potential_pair, sum_mse, sum_rate_logdet

logger = logging.getLogger(__name__)

__all__ = ["OptimizerConfig", "OptimizeResult", "initial_precoders",
           "optimize_uplink", "optimize_downlink", "optimize_simultaneous",
           "capacity_reference"]

MONOTONE_SLACK = 1e-9


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Settings shared by the alternating optimizers.

    ``rho`` and ``beta`` are the uplink/downlink symbol powers of the tied
    simultaneous algorithm; they are ignored when ``normalize_powers`` is
    set. ``init`` is ``'basis'`` (``sqrt(P_k) e_1``) or ``'random'``
    (random direction drawn from ``seed``).
    """
    max_iters: int = 100
    rel_tol: float = 1e-8
    structure: Kind = Kind.LINEAR
    rho: float = 1.0
    beta: float = 1.0
    normalize_powers: bool = False
    capture_trajectory: bool = True
    init: str = "basis"
    seed: int = 0
    order: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "structure", as_kind(self.structure))
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigurationError("max_iters must be a positive integer")
        if not self.rel_tol > 0:
            raise ConfigurationError("rel_tol must be positive")
        if not self.normalize_powers and not (self.rho > 0 and self.beta > 0):
            raise ConfigurationError("rho and beta must be positive")
        if self.init not in ("basis", "random"):
            raise ConfigurationError(f"unknown init {self.init!r}")


@dataclass
class OptimizeResult:
    """Outcome of an optimizer run.

    ``residual`` is the largest filter change produced by one more full
    update applied to ``bank``. ``monotone`` tells whether the trajectory
    never rose by more than 1e-9.
    """
    bank: FilterBank
    trajectory: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    residual: float = np.nan
    monotone: bool = True
    potential_pairs: list = field(default_factory=list)


def initial_precoders(spec, init="basis", seed=0):
    """Unit-direction precoders scaled to the user powers."""
    out = []
    rng = np.random.default_rng(seed)
    for u in range(spec.num_users):
        n_k = spec.user_antennas[u]
        if init == "basis":
            x = np.zeros(n_k, dtype=complex)
            x[0] = 1.0
        else:
            z = rng.standard_normal((n_k, 2))
            x = z[:, 0] + 1j * z[:, 1]
            x /= np.linalg.norm(x)
        out.append(np.sqrt(spec.user_powers[u]) * x)
    return tuple(out)


def _max_change(a, b):
    return max(float(np.linalg.norm(x - y)) for x, y in zip(a, b))


def _is_monotone(trajectory):
    return all(b <= a + MONOTONE_SLACK
               for a, b in zip(trajectory, trajectory[1:]))


def _rel_change(prev, cur):
    return abs(prev - cur) / max(abs(prev), np.finfo(float).tiny)


def optimize_uplink(channels, config=OptimizerConfig(), init_v=None):
    """
    Alternate uplink MMSE receive and power-constrained precoder updates.

    Stops when the relative sum-MSE change over one iteration falls below
    ``config.rel_tol`` or after ``config.max_iters`` iterations. The
    returned feedback taps and bias factors match the final ``v`` and ``g``.
    """
    spec = channels.spec
    kind, order = config.structure, config.order
    v = (initial_precoders(spec, config.init, config.seed)
         if init_v is None else tuple(np.asarray(x, complex) for x in init_v))
    traj = []
    prev = None
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        g, B = uplink_rx_update(channels, v, structure=kind, order=order)
        traj.append(sum_mse(channels, FilterBank(v=v, g=g), kind,
                            order=order))
        v = uplink_tx_update(channels, g, structure=kind, order=order)
        cur = sum_mse(channels, FilterBank(v=v, g=g), kind, order=order)
        traj.append(cur)
        if prev is not None and _rel_change(prev, cur) < config.rel_tol:
            converged = True
            break
        prev = cur
    if kind is Kind.SUCCESSIVE:
        B = feedback_matrix(channels, v, g, order)
    bank = FilterBank(v=v, g=g, B=B, alpha=bias_factors(channels, v, g),
                      order=order)
    g2, _ = uplink_rx_update(channels, v, structure=kind, order=order)
    v2 = uplink_tx_update(channels, g2, structure=kind, order=order)
    residual = max(_max_change(g, g2), _max_change(v, v2))
    return OptimizeResult(bank, traj if config.capture_trajectory else [],
                          it, converged, residual, _is_monotone(traj))


def optimize_downlink(channels, config=OptimizerConfig(), init_r=None):
    """
    Alternate sum-power-constrained downlink precoder and MMSE receive updates.

    Starts from unit-norm receive filters ``e_1`` unless ``init_r`` is given.
    """
    spec = channels.spec
    kind, order = config.structure, config.order
    if init_r is None:
        init_r = [x / np.sqrt(p) for x, p in zip(
            initial_precoders(spec, config.init, config.seed),
            spec.user_powers)]
    r = tuple(np.asarray(x, complex) for x in init_r)
    traj = []
    prev = None
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        t = downlink_tx_update(channels, r, structure=kind, order=order)
        traj.append(sum_mse(channels, FilterBank(t=t, r=r), kind,
                            direction=Direction.DOWNLINK, order=order))
        r = downlink_rx_update(channels, t, structure=kind, order=order)
        cur = sum_mse(channels, FilterBank(t=t, r=r), kind,
                      direction=Direction.DOWNLINK, order=order)
        traj.append(cur)
        if prev is not None and _rel_change(prev, cur) < config.rel_tol:
            converged = True
            break
        prev = cur
    bank = FilterBank(t=t, r=r, order=order)
    t2 = downlink_tx_update(channels, r, structure=kind, order=order)
    r2 = downlink_rx_update(channels, t2, structure=kind, order=order)
    residual = max(_max_change(t, t2), _max_change(r, r2))
    return OptimizeResult(bank, traj if config.capture_trajectory else [],
                          it, converged, residual, _is_monotone(traj))


def _normalize_users(spec, w):
    return tuple(x * np.sqrt(p) / np.linalg.norm(x)
                 for x, p in zip(w, spec.user_powers))


def _normalize_bts(spec, w):
    K = spec.users_per_cell
    out = []
    for c in range(spec.num_cells):
        block = w[c * K:(c + 1) * K]
        total = sum(np.vdot(x, x).real for x in block)
        scale = np.sqrt(spec.bts_power / total)
        out.extend(x * scale for x in block)
    return tuple(out)


def optimize_simultaneous(channels, config=OptimizerConfig(), init_v=None):
    """
    Jointly compute uplink and downlink filters with tied transmit/receive pairs.

    Each user applies one filter both as uplink precoder and downlink
    receiver (``v = r``), and each BTS one filter per user as uplink
    receiver and downlink precoder (``g = t``). Per iteration:

    1. tie ``v := r`` (rescaled to ``P_k`` if ``normalize_powers``),
    2. uplink MMSE update of ``g`` with noise ``sigma^2 / rho``,
    3. tie ``t := g`` (rescaled to the BTS power if ``normalize_powers``),
    4. downlink MMSE update of ``r`` with noise ``sigma_k^2 / beta``.

    With normalization ``rho = beta = 1`` is used in both the updates and
    the recorded potential, and the returned user filters are rescaled to
    ``P_k`` so they serve directly as uplink precoders. The trajectory
    holds the forward potential after steps 2 and 4.
    """
    spec = channels.spec
    kind, order = config.structure, config.order
    normalize = config.normalize_powers
    rho, beta = (1.0, 1.0) if normalize else (config.rho, config.beta)
    user_w = (initial_precoders(spec, config.init, config.seed)
              if init_v is None
              else tuple(np.asarray(x, complex) for x in init_v))
    bts_w = None
    traj, pairs = [], []
    prev = None
    converged = False
    it = 0

    def record():
        bank = FilterBank(v=user_w, r=user_w, g=bts_w, t=bts_w, order=order)
        fwd, bwd = potential_pair(channels, bank, rho, beta, kind, order)
        traj.append(fwd)
        pairs.append((fwd, bwd))
        return fwd

    for it in range(1, config.max_iters + 1):
        if normalize:
            user_w = _normalize_users(spec, user_w)
        bts_w, _ = uplink_rx_update(channels, user_w,
                                    spec.uplink_noise_var / rho, kind, order)
        record()
        if normalize:
            bts_w = _normalize_bts(spec, bts_w)
        user_w = downlink_rx_update(
            channels, bts_w, np.array(spec.user_noise_vars) / beta, kind,
            order)
        cur = record()
        if prev is not None and _rel_change(prev, cur) < config.rel_tol:
            converged = True
            break
        prev = cur
    if normalize:
        # the returned user filters double as uplink precoders
        user_w = _normalize_users(spec, user_w)
    bank = FilterBank(v=user_w, r=user_w, g=bts_w, t=bts_w, order=order)
    return OptimizeResult(bank, traj if config.capture_trajectory else [],
                          it, converged, np.nan, _is_monotone(traj), pairs)


def capacity_reference(channels, powers=None, noise_var=None, restarts=8,
                       max_sweeps=2000, seed=0, tol=1e-12):
    """
    Best rank-one-precoder sum rate found over random restarts (bits).

    Each restart runs block-coordinate ascent on
    ``log2 det(I + sum_k H_k v_k v_k^H H_k^H / sigma^2)``: with the other
    users fixed, the optimal ``v_k`` is ``sqrt(P_k)`` times the dominant
    eigenvector of ``H_k^H A^{-1} H_k`` where ``A`` is the covariance of the
    others plus noise. The value is a lower bound on the true maximum.
    """
    spec = channels.spec
    if spec.num_cells != 1:
        raise ConfigurationError("capacity_reference needs a single cell")
    powers = spec.user_powers if powers is None else tuple(powers)
    noise = spec.uplink_noise_var if noise_var is None else noise_var
    K, N = spec.users_per_cell, spec.bts_antennas
    H = [channels.link(0, u) for u in range(K)]
    rng = np.random.default_rng(seed)
    best = -np.inf
    for _ in range(restarts):
        v = []
        for u in range(K):
            z = rng.standard_normal((spec.user_antennas[u], 2))
            x = z[:, 0] + 1j * z[:, 1]
            v.append(np.sqrt(powers[u]) * x / np.linalg.norm(x))
        cols = np.stack([H[u] @ v[u] for u in range(K)], axis=1)
        prev = -np.inf
        for _ in range(max_sweeps):
            for u in range(K):
                others = np.delete(cols, u, axis=1)
                A = np.eye(N) + others @ others.conj().T / noise
                M = H[u].conj().T @ np.linalg.solve(A, H[u])
                lam, vecs = np.linalg.eigh(M)
                v[u] = np.sqrt(powers[u]) * vecs[:, -1]
                cols[:, u] = H[u] @ v[u]
            value = sum_rate_logdet(channels, v, noise)
            if value - prev <= tol * max(1.0, abs(value)):
                break
            prev = value
        best = max(best, value)
    return best
