"""
Closed-form MMSE filter updates for linear and successive structures.

Uplink successive cancellation (DFD) removes users decoded earlier in
``order``; downlink interference pre-compensation (IPC) removes users
encoded later, i.e. it runs in the reverse order. Only intra-cell users
are cancelled. Interference from other cells always stays in the
covariance.

Filter banks are tuples of 1-D complex arrays indexed by global user.
"""

from dataclasses import dataclass, replace
from enum import Enum
import logging

import numpy as np

from .errors import ConfigurationError, InfeasiblePowerError, ShapeError

logger = logging.getLogger(__name__)

__all__ = ["Kind", "Direction", "Structure", "FilterBank", "solve_multiplier",
           "uplink_rx_update", "uplink_tx_update", "downlink_tx_update",
           "downlink_rx_update", "interference_mask", "hermitian_solve",
           "bias_factors", "feedback_matrix"]


class Kind(str, Enum):
    LINEAR = "linear"
    SUCCESSIVE = "successive"


class Direction(str, Enum):
    UPLINK = "uplink"
    DOWNLINK = "downlink"


@dataclass(frozen=True)
class Structure:
    kind: Kind = Kind.LINEAR
    direction: Direction = Direction.UPLINK

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "direction", Direction(self.direction))


def as_kind(structure):
    """Accept a Structure, a Kind or its string value."""
    if isinstance(structure, Structure):
        return structure.kind
    try:
        return Kind(structure)
    except ValueError:
        raise ConfigurationError(f"unknown structure {structure!r}") from None


@dataclass(frozen=True)
class FilterBank:
    """
    Snapshot of all filters of a topology.

    v : uplink precoders (users), g : BTS feedforward filters,
    t : downlink precoders (BTS), r : downlink receive filters (users).
    ``B`` has shape ``(C, K, K)``: one unit-diagonal feedback matrix per
    cell, lower triangular in decoding order. ``alpha`` holds the bias
    factors ``g_k^H H_k v_k``.
    """
    v: tuple = None
    g: tuple = None
    t: tuple = None
    r: tuple = None
    B: np.ndarray = None
    alpha: np.ndarray = None
    order: tuple = None

    def replace(self, **changes):
        return replace(self, **changes)


def _order_positions(K, order):
    if order is None:
        return np.arange(K)
    order = [int(x) for x in order]
    if sorted(order) != list(range(K)):
        raise ConfigurationError(f"order must be a permutation of 0..{K - 1}")
    pos = np.empty(K, dtype=int)
    pos[order] = np.arange(K)
    return pos


def interference_mask(spec, cell, structure, direction, order=None):
    """
    Boolean ``(K, U)`` mask of the signals present at each receiver of a cell.

    Row ``k`` marks which users' streams (including its own) enter the MSE of
    receiver ``k`` of ``cell``: the BTS filter of that user for the uplink,
    the user's own filter for the downlink.
    """
    kind = as_kind(structure)
    direction = Direction(direction)
    K, U = spec.users_per_cell, spec.num_users
    mask = np.ones((K, U), dtype=bool)
    if kind is Kind.SUCCESSIVE:
        pos = _order_positions(K, order)
        if direction is Direction.UPLINK:
            own = pos[None, :] >= pos[:, None]
        else:
            own = pos[None, :] <= pos[:, None]
        mask[:, cell * K:(cell + 1) * K] = own
    return mask


def _check_bank(spec, bank, sizes, name):
    if bank is None or len(bank) != spec.num_users:
        raise ShapeError(f"{name} must hold one vector per user")
    out = []
    for u, x in enumerate(bank):
        x = np.asarray(x, dtype=complex)
        if x.shape != (sizes[u],):
            raise ShapeError(f"{name}[{u}] has shape {x.shape}, "
                             f"expected {(sizes[u],)}")
        out.append(x)
    return out


def hermitian_solve(A, b):
    """
    Solve ``A x = b`` for Hermitian positive-definite ``A`` (batched).

    A Cholesky factorization validates definiteness. If it fails, a ridge of
    ``1e-12 * trace / dim`` is added once before solving.
    """
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        dim = A.shape[-1]
        scale = np.real(np.trace(A, axis1=-2, axis2=-1)) / dim
        ridge = 1e-12 * np.where(scale > 0, scale, 1.0)
        logger.warning("covariance not positive definite; adding ridge %s",
                       np.max(ridge))
        A = A + ridge[..., None, None] * np.eye(dim)
    return np.linalg.solve(A, b)


def _secular_root(lam, weight, target):
    """
    Root of ``sum(weight / (lam + mu)**2) = target`` for ``mu > -min(lam)``.

    The left side strictly decreases on that interval. The bracket is the
    pole offset by ``1e-12 * mean|lam|`` on the left and an explicit upper
    bound on the right; Newton steps on ``1 / sqrt(f)`` are taken when they
    stay inside the bracket, otherwise the bracket is bisected.
    """
    lam = np.ravel(lam)
    weight = np.ravel(weight)
    total = weight.sum()
    pole = -lam.min()
    eps = 1e-12 * max(np.mean(np.abs(lam)), 1e-300)

    def f(mu):
        return np.sum(weight / (lam + mu) ** 2)

    lo = pole + eps
    f_lo = f(lo)
    if not f_lo >= target:
        raise InfeasiblePowerError(f_lo, target)
    hi = pole + np.sqrt(total / target)
    if hi <= lo:
        return lo
    inv_t = 1.0 / np.sqrt(target)
    mu = hi
    for _ in range(200):
        d = lam + mu
        val = np.sum(weight / d ** 2)
        if abs(val - target) <= 1e-14 * target:
            return mu
        if val > target:
            lo = mu
        else:
            hi = mu
        dval = -2.0 * np.sum(weight / d ** 3)
        # Newton on h(mu) = 1/sqrt(f) - 1/sqrt(target)
        h = 1.0 / np.sqrt(val) - inv_t
        dh = -0.5 * dval * val ** -1.5
        step = mu - h / dh if dh > 0 else np.nan
        if lo < step < hi:
            mu = step
        else:
            mu = 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(abs(lo), abs(hi)):
            return mu
    return mu


def _constrained_solve(A, b, target, allow_boundary=True):
    """
    Solve ``x_m = (A_m + mu I)^{-1} b_m`` with ``sum ||x_m||^2 = target``.

    ``A`` is a stack ``(m, d, d)`` and ``b`` is ``(m, d)``; one multiplier is
    shared by the whole stack. The solution is formed in the eigenbasis so
    it stays accurate when ``mu`` is close to the pole.
    """
    lam, vecs = np.linalg.eigh(A)
    coef = np.einsum("mji,mj->mi", vecs.conj(), b)
    try:
        mu = _secular_root(lam, np.abs(coef) ** 2, target)
    except InfeasiblePowerError:
        if not allow_boundary:
            raise
        return _boundary_solution(lam, vecs, coef, target)
    x = np.einsum("mij,mj->mi", vecs, coef / (lam + mu))
    return x, mu


def _boundary_solution(lam, vecs, coef, target):
    """
    Norm-constrained minimizer when no ``mu`` above the pole reaches the target.

    This happens when ``b`` has no weight on the bottom eigenspace (e.g. a
    rank-deficient ``A`` with ``b`` in its range). Then ``mu = -lambda_min``,
    the remaining components are solved as usual and the missing squared
    norm is placed along a bottom eigenvector.
    """
    mu = -lam.min()
    gap = lam + mu
    bottom = gap <= 1e-12 * max(np.abs(lam).max(), 1e-300)
    scaled = np.where(bottom, 0.0, coef / np.where(bottom, 1.0, gap))
    short = target - np.sum(np.abs(scaled) ** 2)
    m, i = np.argwhere(bottom)[0]
    scaled[m, i] = np.sqrt(max(short, 0.0))
    return np.einsum("mij,mj->mi", vecs, scaled), mu


def solve_multiplier(A, b, target, aggregate="single"):
    """
    Multiplier ``mu`` enforcing a squared-norm target on ``(A + mu I)^{-1} b``.

    Parameters
    ----------
    A : ndarray
        Hermitian PSD matrix ``(d, d)``, or a stack ``(m, d, d)``.
    b : ndarray
        Vector ``(d,)`` or stack ``(m, d)``. A 2-D ``A`` with a 2-D ``b`` is
        shared by all vectors.
    target : float
        Required squared norm (``'single'``) or sum of squared norms
        (``'sum'``).
    aggregate : {'single', 'sum'}

    Returns
    -------
    float
        The unique ``mu > -lambda_min`` meeting the target.

    Raises
    ------
    InfeasiblePowerError
        If the target exceeds the supremum reached as ``mu`` approaches
        ``-lambda_min``.
    """
    A = np.asarray(A, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if not target > 0:
        raise ConfigurationError("target must be positive")
    if aggregate == "single":
        if b.ndim != 1 or A.ndim != 2:
            raise ShapeError("'single' needs a (d, d) matrix and (d,) vector")
    elif aggregate != "sum":
        raise ConfigurationError(f"unknown aggregate {aggregate!r}")
    b = np.atleast_2d(b)
    if A.ndim == 2:
        A = np.broadcast_to(A, (b.shape[0],) + A.shape)
    if A.shape[0] != b.shape[0] or A.shape[1:] != (b.shape[1],) * 2:
        raise ShapeError("A and b dimensions do not match")
    return _constrained_solve(A, b, target, allow_boundary=False)[1]


# -- uplink ----------------------------------------------------------------

def _uplink_signatures(channels, bank, cell):
    """``N x U`` matrix with columns ``H[cell <- u] x_u``."""
    return np.stack([channels.link(cell, u) @ x for u, x in enumerate(bank)],
                    axis=1)


def uplink_rx_update(channels, v_bank, noise_var=None,
                     structure=Kind.LINEAR, order=None):
    """
    MMSE feedforward filters at every BTS for fixed uplink precoders.

    ``g_k = (sum_{i in I(k)} H_i v_i v_i^H H_i^H + noise I)^{-1} H_k v_k``
    where ``I(k)`` is every user for the linear receiver and the users not
    yet decoded for successive cancellation. Other-cell users are always
    included.

    Returns
    -------
    g_bank : tuple of ndarray
    B : ndarray, shape (C, K, K)
        Feedback matrices ``B[c][k, i] = g_k^H H_i v_i`` for users ``i``
        decoded before ``k`` (identity for the linear structure).
    """
    spec = channels.spec
    kind = as_kind(structure)
    v_bank = _check_bank(spec, v_bank, spec.user_antennas, "v_bank")
    noise = spec.uplink_noise_var if noise_var is None else float(noise_var)
    K, N = spec.users_per_cell, spec.bts_antennas
    pos = _order_positions(K, order)
    g_bank = []
    B = np.tile(np.eye(K, dtype=complex), (spec.num_cells, 1, 1))
    eye = np.eye(N)
    for c in range(spec.num_cells):
        own = spec.users_of(c)
        E = _uplink_signatures(channels, v_bank, c)
        if kind is Kind.LINEAR:
            cov = E @ E.conj().T + noise * eye
            G = hermitian_solve(cov, E[:, own.start:own.stop]).T
        else:
            mask = interference_mask(spec, c, kind, Direction.UPLINK, order)
            cov = np.einsum("nu,ku,mu->knm", E, mask, E.conj()) + noise * eye
            rhs = E[:, own.start:own.stop].T[:, :, None]
            G = hermitian_solve(cov, rhs)[:, :, 0]
            proj = G.conj() @ E[:, own.start:own.stop]
            earlier = pos[None, :] < pos[:, None]
            B[c][earlier] = proj[earlier]
        g_bank.extend(G)
    return tuple(g_bank), B


def _uplink_tx_matrices(channels, g_bank, structure, order):
    """Per-user quadratic forms ``A_u`` and linear terms ``b_u`` for v-updates."""
    spec = channels.spec
    K = spec.users_per_cell
    G = [np.stack(g_bank[c * K:(c + 1) * K], axis=1)
         for c in range(spec.num_cells)]
    masks = [interference_mask(spec, c, structure, Direction.UPLINK, order)
             for c in range(spec.num_cells)]
    for u in range(spec.num_users):
        c_u = spec.cell_of(u)
        n_k = spec.user_antennas[u]
        A = np.zeros((n_k, n_k), dtype=complex)
        for c in range(spec.num_cells):
            F = channels.link(c, u).conj().T @ G[c]
            F = F[:, masks[c][:, u]]
            A += F @ F.conj().T
        b = channels.link(c_u, u).conj().T @ g_bank[u]
        yield u, A, b


def uplink_tx_update(channels, g_bank, powers=None, structure=Kind.LINEAR,
                     order=None, return_multipliers=False):
    """
    Power-constrained MMSE uplink precoders for fixed BTS filters.

    ``v_k = (sum_{i in J(k)} H_k^H g_i g_i^H H_k + mu_k I)^{-1} H_k^H g_k``
    with ``||v_k||^2 = P_k`` exactly. ``J(k)`` collects every receiver whose
    MSE contains user ``k``: all own-cell receivers for the linear structure,
    those decoded no earlier than ``k`` for successive cancellation, and all
    receivers of other cells.

    Returns
    -------
    v_bank : tuple of ndarray
    mu : ndarray, only if ``return_multipliers``
    """
    spec = channels.spec
    g_bank = _check_bank(spec, g_bank, [spec.bts_antennas] * spec.num_users,
                         "g_bank")
    powers = spec.user_powers if powers is None else tuple(powers)
    v_bank, mus = [], []
    for u, A, b in _uplink_tx_matrices(channels, g_bank, structure, order):
        x, mu = _constrained_solve(A[None], b[None], powers[u])
        v_bank.append(x[0])
        mus.append(mu)
    if return_multipliers:
        return tuple(v_bank), np.array(mus)
    return tuple(v_bank)


# -- downlink --------------------------------------------------------------

def _downlink_mask(spec, structure, order):
    """``(U, U)`` mask: entry ``[u_rx, u_tx]`` if beam u_tx reaches u_rx's MSE."""
    rows = [interference_mask(spec, c, structure, Direction.DOWNLINK, order)
            for c in range(spec.num_cells)]
    return np.concatenate(rows, axis=0)


def downlink_tx_update(channels, r_bank, bts_power=None,
                       structure=Kind.LINEAR, order=None,
                       return_multipliers=False):
    """
    Sum-power-constrained MMSE downlink precoders for fixed user filters.

    ``t_k = (sum_{i in I'(k)} H_i r_i r_i^H H_i^H + mu I)^{-1} H_k r_k``;
    one multiplier per BTS enforces ``sum_k ||t_k||^2 = P``. With IPC,
    ``I'(k)`` holds the users encoded no later than ``k`` in reverse order,
    i.e. ``k..K`` for the natural order.
    """
    spec = channels.spec
    r_bank = _check_bank(spec, r_bank, spec.user_antennas, "r_bank")
    power = spec.bts_power if bts_power is None else float(bts_power)
    mask = _downlink_mask(spec, structure, order)
    t_bank, mus = [], []
    for c in range(spec.num_cells):
        own = spec.users_of(c)
        W = _uplink_signatures(channels, r_bank, c)
        sel = mask[:, own.start:own.stop].T
        A = np.einsum("nu,ku,mu->knm", W, sel, W.conj())
        x, mu = _constrained_solve(A, W[:, own.start:own.stop].T, power)
        t_bank.extend(x)
        mus.append(mu)
    if return_multipliers:
        return tuple(t_bank), np.array(mus)
    return tuple(t_bank)


def _downlink_signatures(channels, t_bank, u_rx):
    """``N_k x U`` matrix with columns ``H[BTS(u) <- u_rx]^H t_u``."""
    spec = channels.spec
    return np.stack(
        [channels.link(spec.cell_of(u), u_rx).conj().T @ t
         for u, t in enumerate(t_bank)], axis=1)


def downlink_rx_update(channels, t_bank, user_noise_vars=None,
                       structure=Kind.LINEAR, order=None):
    """
    MMSE receive filters at every user for fixed downlink precoders.

    ``r_k = (sum_{i in J'(k)} H_k^H t_i t_i^H H_k + sigma_k^2 I)^{-1} H_k^H t_k``
    with ``J'(k)`` all own-cell beams (linear) or those not pre-compensated
    (IPC: ``1..k`` in the natural order), plus all other-cell beams.
    """
    spec = channels.spec
    t_bank = _check_bank(spec, t_bank, [spec.bts_antennas] * spec.num_users,
                         "t_bank")
    if user_noise_vars is None:
        noise = spec.user_noise_vars
    elif np.isscalar(user_noise_vars):
        noise = (float(user_noise_vars),) * spec.num_users
    else:
        noise = tuple(user_noise_vars)
    mask = _downlink_mask(spec, structure, order)
    r_bank = []
    for u in range(spec.num_users):
        F = _downlink_signatures(channels, t_bank, u)
        Fm = F[:, mask[u]]
        cov = Fm @ Fm.conj().T + noise[u] * np.eye(F.shape[0])
        r_bank.append(hermitian_solve(cov, F[:, u]))
    return tuple(r_bank)


def bias_factors(channels, v_bank, g_bank):
    """``alpha_u = g_u^H H_u v_u`` for every user."""
    return np.array([np.vdot(g, channels.direct(u) @ v)
                     for u, (v, g) in enumerate(zip(v_bank, g_bank))])


def feedback_matrix(channels, v_bank, g_bank, order=None):
    """
    DFD feedback taps ``B[c][k, i] = g_k^H H_i v_i`` for the given filters.

    Entries for users decoded at or after ``k`` follow the unit lower
    triangular convention (one on the diagonal, zero above).
    """
    spec = channels.spec
    K = spec.users_per_cell
    pos = _order_positions(K, order)
    earlier = pos[None, :] < pos[:, None]
    B = np.tile(np.eye(K, dtype=complex), (spec.num_cells, 1, 1))
    for c in range(spec.num_cells):
        own = spec.users_of(c)
        E = _uplink_signatures(channels, v_bank, c)[:, own.start:own.stop]
        G = np.stack(g_bank[own.start:own.stop])
        B[c][earlier] = (G.conj() @ E)[earlier]
    return B
