"""
Bi-directional training of precoders and receivers without channel knowledge.

Forward (uplink) rounds: users send precoded pilots synchronously and each
BTS estimates its feedforward filters, plus the feedback taps of a
decision-feedback detector, by least squares. Backward (downlink) rounds:
each BTS sends pilots through its feedforward filters and every user
estimates a norm-constrained receive filter, which becomes its next uplink
precoder. Successive structures pre-compensate downlink interference either
by layering pilots user by user or by Tomlinson-Harashima precoding.
"""

from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np
from scipy.linalg import hadamard

from .errors import BiasDegenerateError, ConfigurationError, ShapeError
from .mmse_core import (FilterBank, Kind, _constrained_solve,
                        _order_positions, as_kind, bias_factors,
                        uplink_rx_update, uplink_tx_update)
from .objectives import precoder_rates, sum_mse
from .optimizer import initial_precoders

logger = logging.getLogger(__name__)

__all__ = ["TrainingMode", "TrainingConfig", "PilotBlock", "BtsEstimate",
           "BackwardResult", "TrainingResult", "gen_pilots",
           "simulate_uplink_rx", "ls_bts_rx", "dfd_outputs", "estimate_bias",
           "modulo", "thp_encode", "detect_offsets", "ls_user_rx",
           "backward_round", "bidirectional_train"]

QPSK_TAU = 2.0 * np.sqrt(2.0)
MIN_BIAS = 1e-6


class TrainingMode(str, Enum):
    LINEAR = "linear"
    SEQUENTIAL = "sequential"
    THP = "thp"


@dataclass(frozen=True)
class TrainingConfig:
    """
    Settings of a bi-directional training run.

    ``gamma`` is the downlink pilot power per stream; ``None`` picks the
    value that uses the whole BTS power budget in every backward round.
    ``oracle_updates`` replaces both least-squares steps by the exact MMSE
    updates (infinite training).
    """
    n: int = 20
    rounds: int = 2
    mode: TrainingMode = TrainingMode.LINEAR
    gamma: float = None
    tau: float = QPSK_TAU
    seed: int = 0
    oracle_updates: bool = False
    orthogonal_pilots: bool = False
    order: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainingMode(self.mode))
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError("pilot length n must be >= 1")
        if int(self.rounds) != self.rounds or self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigurationError("gamma must be positive")

    @property
    def structure(self):
        if self.mode is TrainingMode.LINEAR:
            return Kind.LINEAR
        return Kind.SUCCESSIVE


@dataclass
class PilotBlock:
    """Pilots and observations of one training round at one node."""
    S: np.ndarray
    Y: np.ndarray = None
    Z: np.ndarray = None
    alpha_hat: np.ndarray = None

    @property
    def n(self):
        return self.S.shape[1]


class BtsEstimate(tuple):
    """``(g, B, regularized)``: filters as columns, feedback matrix, ridge flag."""

    def __new__(cls, g, B, regularized):
        return super().__new__(cls, (g, B, regularized))

    g = property(lambda self: self[0])
    B = property(lambda self: self[1])
    regularized = property(lambda self: self[2])


@dataclass
class BackwardResult:
    v: tuple
    Z: list = None
    Z_hat: list = None
    offset_errors: int = 0
    offset_total: int = 0


@dataclass
class TrainingResult:
    bank: FilterBank
    trajectory: list = field(default_factory=list)
    offset_errors: int = 0
    offset_total: int = 0


def gen_pilots(K, n, seed=0, orthogonal=False):
    """
    ``K x n`` matrix of unit-magnitude QPSK pilots.

    With ``orthogonal`` the rows are mutually orthogonal (``S S^H = n I``):
    scaled Hadamard rows when ``n`` is a power of two, DFT rows otherwise.
    """
    if K < 1 or n < 1:
        raise ConfigurationError("K and n must be positive")
    if orthogonal:
        if n < K:
            raise ConfigurationError("orthogonal pilots need n >= K")
        if n & (n - 1) == 0:
            return hadamard(n)[:K].astype(complex) * (1 + 1j) / np.sqrt(2)
        t = np.arange(n)
        return np.exp(-2j * np.pi * np.outer(np.arange(K), t) / n)
    bits = np.random.default_rng(seed).integers(0, 2, size=(K, n, 2))
    sym = 2.0 * bits - 1.0
    return (sym[..., 0] + 1j * sym[..., 1]) / np.sqrt(2)


def _cscg(rng, shape, var):
    z = rng.standard_normal(shape + (2,))
    return np.sqrt(var / 2.0) * (z[..., 0] + 1j * z[..., 1])


def simulate_uplink_rx(channels, v_bank, S, noise_var=None, seed=0):
    """
    Received pilot samples at every BTS, shape ``(C, N, n)``.

    ``Y_c = sum_u H[c <- u] v_u s_u + noise`` with all users of all cells
    transmitting synchronously.
    """
    spec = channels.spec
    S = np.asarray(S)
    if S.shape[0] != spec.num_users:
        raise ShapeError("S must have one row per user")
    noise = spec.uplink_noise_var if noise_var is None else noise_var
    rng = np.random.default_rng(seed)
    Y = np.empty((spec.num_cells, spec.bts_antennas, S.shape[1]),
                 dtype=complex)
    for c in range(spec.num_cells):
        E = np.stack([channels.link(c, u) @ v for u, v in enumerate(v_bank)],
                     axis=1)
        Y[c] = E @ S
    if noise > 0:
        Y += _cscg(rng, Y.shape, noise)
    return Y


def _ls_solve(X, d):
    """Least-squares weights ``(X X^H)^{-1} X d^H``; flags a ridge fallback."""
    R = X @ X.conj().T
    rhs = X @ d.conj().T
    dim = R.shape[0]
    regularized = X.shape[1] < dim
    if not regularized:
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            regularized = True
    if regularized:
        scale = np.real(np.trace(R)) / dim
        R = R + 1e-10 * (scale if scale > 0 else 1.0) * np.eye(dim)
    return np.linalg.solve(R, rhs), regularized


def ls_bts_rx(Y, S, structure=Kind.LINEAR, order=None):
    """
    Least-squares feedforward (and feedback) filters at one BTS.

    Parameters
    ----------
    Y : ndarray, (N, n)
        Received samples.
    S : ndarray, (K, n)
        Pilots of the BTS's own users.
    structure : Kind
        Linear: ``g_k = (Y Y^H)^{-1} Y s_k^H``. Successive: ``[g_k; -b_k^H]``
        solves the stacked normal equations with the already-decoded pilots
        as extra regressors.

    Returns
    -------
    BtsEstimate
        ``g`` is ``(N, K)`` with one filter per column; ``B`` is unit lower
        triangular in decoding order.
    """
    kind = as_kind(structure)
    Y = np.asarray(Y)
    S = np.asarray(S)
    N, K = Y.shape[0], S.shape[0]
    if Y.shape[1] != S.shape[1]:
        raise ShapeError("Y and S must have the same number of samples")
    B = np.eye(K, dtype=complex)
    if kind is Kind.LINEAR:
        G, regularized = _ls_solve(Y, S)
        return BtsEstimate(G, B, regularized)
    order = list(range(K)) if order is None else list(order)
    _order_positions(K, order)
    G = np.empty((N, K), dtype=complex)
    regularized = False
    for p, k in enumerate(order):
        earlier = order[:p]
        X = np.vstack([Y, S[earlier]])
        w, flag = _ls_solve(X, S[k:k + 1])
        regularized |= flag
        G[:, k] = w[:N, 0]
        B[k, earlier] = -w[N:, 0].conj()
    if regularized:
        logger.warning("rank-deficient pilot Gram matrix; ridge applied")
    return BtsEstimate(G, B, regularized)


def dfd_outputs(Y, S, G, B):
    """DFD soft outputs ``g_k^H Y - b_k S_earlier`` with genie feedback."""
    return G.conj().T @ Y - (B - np.eye(B.shape[0])) @ S


def estimate_bias(s_hat, s, n=None):
    """Bias factor estimate ``s_hat s^H / n`` for unit-power pilots."""
    s_hat = np.asarray(s_hat)
    s = np.asarray(s)
    n = s.shape[-1] if n is None else n
    return complex(np.vdot(s, s_hat) / n)


def modulo(x, tau=QPSK_TAU):
    """Fold real and imaginary parts into ``[-tau/2, tau/2)``."""
    return (x.real - tau * np.floor(x.real / tau + 0.5)
            + 1j * (x.imag - tau * np.floor(x.imag / tau + 0.5)))


def thp_encode(S, B, alpha, tau=QPSK_TAU, order=None):
    """
    Tomlinson-Harashima precoding of one cell's downlink symbols.

    Users are processed from the last decoded to the first. For user ``k``
    the already-encoded later users are pre-subtracted through the
    bias-compensated feedback taps ``conj(B[i, k] / alpha_k)`` before the
    modulo fold.

    Returns
    -------
    S_tilde : ndarray, (K, n)
        Encoded symbols, every component in ``[-tau/2, tau/2)``.
    Z : ndarray, (K, n)
        Offsets with ``S_tilde[k] = Z[k] + S[k] - feedback[k]``; each
        component is an integer multiple of ``tau``.
    """
    S = np.asarray(S, dtype=complex)
    B = np.asarray(B)
    alpha = np.asarray(alpha, dtype=complex)
    K = S.shape[0]
    order = list(range(K)) if order is None else list(order)
    if np.any(np.abs(alpha) < MIN_BIAS):
        raise BiasDegenerateError(
            f"bias factor below {MIN_BIAS}: {np.min(np.abs(alpha)):.3g}")
    S_tilde = np.zeros_like(S)
    Z = np.zeros_like(S)
    for p in range(K - 1, -1, -1):
        k = order[p]
        later = order[p + 1:]
        taps = np.conj(B[later, k] / alpha[k])
        pre = S[k] - taps @ S_tilde[later]
        shift = (-tau * np.floor(pre.real / tau + 0.5)
                 - 1j * tau * np.floor(pre.imag / tau + 0.5))
        Z[k] = shift
        S_tilde[k] = pre + shift
    return S_tilde, Z


def detect_offsets(filtered, gain, s, tau=QPSK_TAU):
    """
    Slice THP offsets from a receive-filter output.

    The output is divided by ``gain``, the known pilot is removed and each
    real dimension is rounded to the nearest multiple of ``tau``.
    """
    q = np.asarray(filtered) / gain - np.asarray(s)
    return tau * (np.round(q.real / tau) + 1j * np.round(q.imag / tau))


def ls_user_rx(Y, d, power):
    """
    Norm-constrained least-squares receive filter at a user.

    ``v = (Y Y^H + mu I)^{-1} Y d^H`` with ``mu`` chosen so that
    ``||v||^2 = power``.
    """
    Y = np.asarray(Y)
    d = np.asarray(d)
    A = Y @ Y.conj().T
    b = Y @ d.conj()
    x, _ = _constrained_solve(A[None], b[None], power)
    return x[0]


def _bts_gammas(spec, g_bank, gamma):
    K = spec.users_per_cell
    if gamma is not None:
        return [float(gamma)] * spec.num_cells
    return [spec.bts_power
            / sum(np.vdot(x, x).real for x in g_bank[c * K:(c + 1) * K])
            for c in range(spec.num_cells)]


def _downlink_receive(channels, X, u, noise, rng):
    """User ``u``'s samples for per-BTS transmit matrices ``X[c]`` (N x n)."""
    spec = channels.spec
    Y = sum(channels.link(c, u).conj().T @ X[c]
            for c in range(spec.num_cells))
    if noise > 0:
        Y = Y + _cscg(rng, Y.shape, noise)
    return Y


def backward_round(channels, bank, S, mode, gamma=None, noise=None,
                   seed=0, tau=QPSK_TAU, order=None):
    """
    Downlink training round: estimate every user's receive filter.

    Parameters
    ----------
    bank : FilterBank
        Needs ``g``; THP mode also needs ``B``, ``alpha`` (the forward-round
        estimates) and ``v`` (the current filters, used to slice offsets).
    S : ndarray, (U, n)
        Downlink pilots.
        Each pilot is sent with power ``gamma`` and users regress on the
        transmitted symbols ``sqrt(gamma) s``, so that with many pilots the
        estimate reduces to the MMSE precoder update.
    mode : TrainingMode
        ``linear``: all beams transmitted at once. ``sequential``: for each
        decoding position ``p`` the users at positions ``<= p`` are
        transmitted and the user at ``p`` trains. ``thp``: pilots are THP
        encoded; users detect the offsets and train on ``Z + s``.
    """
    spec = channels.spec
    mode = TrainingMode(mode)
    K, U = spec.users_per_cell, spec.num_users
    S = np.asarray(S)
    if S.shape[0] != U:
        raise ShapeError("S must have one row per user")
    noise = (np.array(spec.user_noise_vars) if noise is None
             else np.broadcast_to(noise, (U,)))
    g = bank.g
    gammas = _bts_gammas(spec, g, gamma)
    root = np.sqrt(gammas)
    rng = np.random.default_rng(seed)
    powers = spec.user_powers
    v_new = [None] * U

    def beams(c, symbols, users):
        X = np.zeros((spec.bts_antennas, S.shape[1]), dtype=complex)
        for u in users:
            X += np.outer(g[u], symbols[u])
        return root[c] * X

    if mode is TrainingMode.LINEAR:
        X = [beams(c, S, spec.users_of(c)) for c in range(spec.num_cells)]
        for u in range(U):
            Y = _downlink_receive(channels, X, u, noise[u], rng)
            v_new[u] = ls_user_rx(Y, root[spec.cell_of(u)] * S[u], powers[u])
        return BackwardResult(tuple(v_new))

    order = list(range(K)) if order is None else list(order)
    pos = _order_positions(K, order)
    if mode is TrainingMode.SEQUENTIAL:
        for p in range(K):
            X = [beams(c, S, [c * K + k for k in range(K) if pos[k] <= p])
                 for c in range(spec.num_cells)]
            for c in range(spec.num_cells):
                u = c * K + order[p]
                Y = _downlink_receive(channels, X, u, noise[u], rng)
                v_new[u] = ls_user_rx(Y, root[c] * S[u], powers[u])
        return BackwardResult(tuple(v_new))

    if bank.B is None or bank.alpha is None or bank.v is None:
        raise ConfigurationError("THP training needs B, alpha and v")
    S_tilde = np.empty_like(S, dtype=complex)
    Z = np.empty_like(S, dtype=complex)
    for c in range(spec.num_cells):
        own = slice(c * K, (c + 1) * K)
        S_tilde[own], Z[own] = thp_encode(S[own], bank.B[c],
                                          bank.alpha[own], tau, order)
    X = [beams(c, S_tilde, spec.users_of(c)) for c in range(spec.num_cells)]
    Z_hat = np.empty_like(Z)
    for u in range(U):
        c = spec.cell_of(u)
        Y = _downlink_receive(channels, X, u, noise[u], rng)
        gain = root[c] * np.conj(bank.alpha[u])
        Z_hat[u] = detect_offsets(np.asarray(bank.v[u]).conj() @ Y, gain,
                                  S[u], tau)
        v_new[u] = ls_user_rx(Y, root[c] * (Z_hat[u] + S[u]), powers[u])
    errors = int(np.count_nonzero(~np.isclose(Z_hat, Z, atol=tau / 4)))
    return BackwardResult(tuple(v_new), Z, Z_hat, errors, Z.size)


def bidirectional_train(channels, config=TrainingConfig(), init_v=None):
    """
    Run ``config.rounds`` forward-backward training iterations.

    After every round the trajectory records the sum MSE of the current
    bank (forward-round BTS filters with the new precoders) and the sum
    rate of the new precoders with MMSE receivers (summed over cells).
    """
    spec = channels.spec
    kind = config.structure
    order = config.order
    K, U = spec.users_per_cell, spec.num_users
    v = (initial_precoders(spec) if init_v is None
         else tuple(np.asarray(x, complex) for x in init_v))
    n = config.n
    if not config.oracle_updates:
        need = spec.bts_antennas + (K - 1 if kind is Kind.SUCCESSIVE else 0)
        if n < need:
            logger.warning("pilot length %d below the %d unknowns per filter",
                           n, need)
    trajectory = []
    offset_errors = offset_total = 0
    bank = None
    for rnd in range(config.rounds):
        if config.oracle_updates:
            g, B = uplink_rx_update(channels, v, structure=kind, order=order)
            alpha = bias_factors(channels, v, g)
            v_next = uplink_tx_update(channels, g, structure=kind,
                                      order=order)
        else:
            S_up = gen_pilots(U, n, [config.seed, rnd, 0],
                              config.orthogonal_pilots)
            Y = simulate_uplink_rx(channels, v, S_up,
                                   seed=[config.seed, rnd, 1])
            g = [None] * U
            B = np.empty((spec.num_cells, K, K), dtype=complex)
            alpha = np.empty(U, dtype=complex)
            for c in range(spec.num_cells):
                own = slice(c * K, (c + 1) * K)
                est = ls_bts_rx(Y[c], S_up[own], kind, order)
                B[c] = est.B
                g[own] = list(est.g.T)
                s_hat = dfd_outputs(Y[c], S_up[own], est.g, est.B)
                alpha[own] = [estimate_bias(s_hat[k], S_up[own][k])
                              for k in range(K)]
            g = tuple(g)
            S_dn = gen_pilots(U, n, [config.seed, rnd, 2],
                              config.orthogonal_pilots)
            back = backward_round(
                channels, FilterBank(v=v, g=g, B=B, alpha=alpha), S_dn,
                config.mode, config.gamma, seed=[config.seed, rnd, 3],
                tau=config.tau, order=order)
            offset_errors += back.offset_errors
            offset_total += back.offset_total
            v_next = back.v
        v = v_next
        bank = FilterBank(v=v, g=g, B=B, alpha=alpha, order=order)
        rates, _ = precoder_rates(channels, v, kind, order=order)
        trajectory.append({
            "round": rnd + 1,
            "sum_mse": sum_mse(channels, bank, kind, order=order),
            "sum_rate": float(rates.sum()),
        })
    return TrainingResult(bank, trajectory, offset_errors, offset_total)
