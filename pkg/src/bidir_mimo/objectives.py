"""
Scalar objectives: MSEs, Lagrangian, potential functions and sum rates.

Successive structures assume genie-aided cancellation (correct past
decisions), so their MSEs and SINRs simply drop the cancelled terms.
"""

import numpy as np

from .channel_model import effective_channel
from .mmse_core import (Direction, FilterBank, Kind, Structure, as_kind,
                        interference_mask, _check_bank,
                        _downlink_signatures, _uplink_signatures,
                        downlink_rx_update, uplink_rx_update)
from .errors import ConfigurationError

__all__ = ["user_mse", "sum_mse", "lagrangian", "potential_pair",
           "sum_rate_logdet", "user_sinr_rates", "mmse_trace_spectrum",
           "precoder_rates"]

SINR_CAP = 1e12


def _direction(structure, direction):
    if direction is not None:
        return Direction(direction)
    if isinstance(structure, Structure):
        return structure.direction
    return Direction.UPLINK


def _user_noise(spec, noise):
    if noise is None:
        return np.array(spec.user_noise_vars)
    return np.broadcast_to(np.asarray(noise, dtype=float), (spec.num_users,))


def _output_powers(channels, bank, structure, direction, order):
    """
    Per receiver: (filter, |w^H s_u|^2 over present streams, own term).

    Yields ``(u, w, powers, desired)`` where ``powers`` already has the
    cancelled streams zeroed and ``desired`` is the complex own-stream gain.
    """
    spec = channels.spec
    if direction is Direction.UPLINK:
        g = _check_bank(spec, bank.g, [spec.bts_antennas] * spec.num_users,
                        "g")
        v = _check_bank(spec, bank.v, spec.user_antennas, "v")
        for c in range(spec.num_cells):
            E = _uplink_signatures(channels, v, c)
            mask = interference_mask(spec, c, structure, direction, order)
            for k, u in enumerate(spec.users_of(c)):
                proj = g[u].conj() @ E
                yield u, g[u], np.abs(proj) ** 2 * mask[k], proj[u]
    else:
        t = _check_bank(spec, bank.t, [spec.bts_antennas] * spec.num_users,
                        "t")
        r = _check_bank(spec, bank.r, spec.user_antennas, "r")
        for c in range(spec.num_cells):
            mask = interference_mask(spec, c, structure, direction, order)
            for k, u in enumerate(spec.users_of(c)):
                proj = r[u].conj() @ _downlink_signatures(channels, t, u)
                yield u, r[u], np.abs(proj) ** 2 * mask[k], proj[u]


def user_mse(channels, bank, structure=Kind.LINEAR, noise=None,
             direction=None, order=None):
    """
    Per-user MSE ``1 + noise ||w||^2 - 2 Re{desired} + sum |w^H s_i|^2``.

    ``noise`` defaults to the uplink noise variance (uplink) or the user
    noise variances (downlink); a scalar or per-user array overrides it.
    """
    spec = channels.spec
    direction = _direction(structure, direction)
    if direction is Direction.UPLINK:
        noise = np.full(spec.num_users, spec.uplink_noise_var
                        if noise is None else noise, dtype=float)
    else:
        noise = _user_noise(spec, noise)
    out = np.empty(spec.num_users)
    for u, w, powers, desired in _output_powers(channels, bank, structure,
                                                direction, order):
        out[u] = (1.0 + noise[u] * np.vdot(w, w).real - 2.0 * desired.real
                  + powers.sum())
    return out


def sum_mse(channels, bank, structure=Kind.LINEAR, noise=None,
            direction=None, order=None):
    """Sum of :func:`user_mse` over all users of all cells."""
    return float(user_mse(channels, bank, structure, noise, direction,
                          order).sum())


def lagrangian(channels, bank, mu, structure=Kind.LINEAR, noise=None,
               direction=None, order=None):
    """
    Sum MSE plus multiplier-weighted power slack.

    Uplink: ``sum_k mu_k (||v_k||^2 - P_k)`` with one multiplier per user.
    Downlink: ``sum_c mu_c (sum_k ||t_k||^2 - P)`` with one per BTS.
    """
    spec = channels.spec
    direction = _direction(structure, direction)
    value = sum_mse(channels, bank, structure, noise, direction, order)
    mu = np.asarray(mu, dtype=float)
    if direction is Direction.UPLINK:
        slack = np.array([np.vdot(x, x).real for x in bank.v])
        slack -= np.array(spec.user_powers)
    else:
        K = spec.users_per_cell
        slack = np.array([
            sum(np.vdot(x, x).real for x in bank.t[c * K:(c + 1) * K])
            - spec.bts_power for c in range(spec.num_cells)])
    if mu.shape != slack.shape:
        raise ConfigurationError(f"expected {slack.size} multipliers")
    return value + float(mu @ slack)


def potential_pair(channels, bank, rho, beta, structure=Kind.LINEAR,
                   order=None):
    """
    Forward and backward potential functions of a tied filter bank.

    ``phi_fwd = sum_k eps_up(k, rho) + sigma_k^2 ||v_k||^2 / beta`` and
    ``phi_bwd = sum_k eps_dn(k, beta) + sigma^2 ||t_k||^2 / rho``, where the
    MSEs use the noise normalized by the symbol powers. For a bank with
    ``v = r`` and ``t = g`` the two values coincide.
    """
    if not (rho > 0 and beta > 0):
        raise ConfigurationError("rho and beta must be positive")
    spec = channels.spec
    kind = as_kind(structure)
    sig_u = np.array(spec.user_noise_vars)
    fwd = sum_mse(channels, bank, kind, spec.uplink_noise_var / rho,
                  Direction.UPLINK, order)
    fwd += float(sum(s * np.vdot(x, x).real for s, x in zip(sig_u, bank.v))
                 / beta)
    bwd = sum_mse(channels, bank, kind, sig_u / beta, Direction.DOWNLINK,
                  order)
    bwd += float(sum(np.vdot(x, x).real for x in bank.t)
                 * spec.uplink_noise_var / rho)
    return fwd, bwd


def sum_rate_logdet(channels, v_bank, noise_var=None, cell=0):
    """
    ``log2 det(I + sum_k H_k v_k v_k^H H_k^H / sigma^2)`` in bits.

    Intra-cell only; this is the sum capacity of the cell's multiple-access
    channel for the given precoders.
    """
    spec = channels.spec
    noise = spec.uplink_noise_var if noise_var is None else noise_var
    E = effective_channel(channels, v_bank, cell)
    gram = np.eye(E.shape[0]) + (E @ E.conj().T) / noise
    sign, logdet = np.linalg.slogdet(gram)
    return max(float(logdet / np.log(2.0)), 0.0)


def user_sinr_rates(channels, bank, structure=Kind.LINEAR, noise=None,
                    direction=None, order=None, return_sinr=False):
    """
    Per-user rates ``log2(1 + SINR_k)`` at the receive filter outputs.

    SINR is the desired output power over the interference from uncancelled
    streams plus filtered noise, capped at ``1e12``.
    """
    spec = channels.spec
    direction = _direction(structure, direction)
    if direction is Direction.UPLINK:
        noise = np.full(spec.num_users, spec.uplink_noise_var
                        if noise is None else noise, dtype=float)
    else:
        noise = _user_noise(spec, noise)
    sinr = np.empty(spec.num_users)
    for u, w, powers, desired in _output_powers(channels, bank, structure,
                                                direction, order):
        signal = abs(desired) ** 2
        denom = powers.sum() - signal + noise[u] * np.vdot(w, w).real
        if signal == 0.0:
            sinr[u] = 0.0
        elif denom <= signal / SINR_CAP:
            sinr[u] = SINR_CAP
        else:
            sinr[u] = signal / denom
    rates = np.log2(1.0 + sinr)
    if return_sinr:
        return rates, sinr
    return rates


def precoder_rates(channels, precoders, structure=Kind.LINEAR,
                   direction=Direction.UPLINK, order=None):
    """
    Rates and MSEs obtained with MMSE receive filters for given precoders.

    This is the achievable performance of a set of precoders: the receive
    side is recomputed for them rather than taken from training.

    Returns
    -------
    rates : ndarray, per user
    mse : ndarray, per user
    """
    direction = Direction(direction)
    if direction is Direction.UPLINK:
        g, _ = uplink_rx_update(channels, precoders, structure=structure,
                                order=order)
        bank = FilterBank(v=tuple(precoders), g=g)
    else:
        r = downlink_rx_update(channels, precoders, structure=structure,
                               order=order)
        bank = FilterBank(t=tuple(precoders), r=r)
    rates = user_sinr_rates(channels, bank, structure, direction=direction,
                            order=order)
    mse = user_mse(channels, bank, structure, direction=direction,
                   order=order)
    return rates, mse


def mmse_trace_spectrum(effective_H, noise_var):
    """
    Sum MMSE of a composite channel and the eigenvalues it depends on.

    Returns ``(K - sum_i lam_i / (lam_i + noise), lam)`` where ``lam`` are
    the eigenvalues of ``H H^H`` in descending order.
    """
    H = np.asarray(effective_H, dtype=complex)
    K = H.shape[1]
    lam = np.linalg.eigvalsh(H @ H.conj().T)[::-1]
    lam = np.clip(lam, 0.0, None)
    return float(K - np.sum(lam / (lam + noise_var))), lam
