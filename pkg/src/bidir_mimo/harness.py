"""
Monte Carlo experiment runner: SNR sweeps over filter-design schemes.

Every trial draws one channel realization that is shared by all SNR points
and all schemes (common random numbers), so scheme differences are not
masked by channel-to-channel variance. SNR is ``P_k / sigma^2`` with the
uplink and downlink noise levels tied by ``user_noise_ratio``.
"""

from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, fields
import logging
import math

import numpy as np

from .channel_model import TopologySpec, sample_channels
from .errors import ConfigurationError
from .mmse_core import Direction, Kind
from .objectives import precoder_rates
from .optimizer import (OptimizerConfig, capacity_reference,
                        optimize_downlink, optimize_simultaneous,
                        optimize_uplink)
from .training import TrainingConfig, TrainingMode, bidirectional_train

logger = logging.getLogger(__name__)

__all__ = ["Scheme", "ExperimentConfig", "ResultRecord", "run_experiment",
           "emit_csv", "read_csv", "preset", "PRESETS", "CSV_HEADER"]

CSV_HEADER = ("snr_db", "scheme", "rounds", "pilots", "sum_rate_mean",
              "sum_rate_stderr", "sum_mse_mean", "trials")

METHODS = ("uplink", "downlink", "simultaneous-uplink",
           "simultaneous-downlink", "training", "capacity")


@dataclass(frozen=True)
class Scheme:
    """
    One curve of an experiment.

    ``method`` selects the algorithm: full-CSI ``uplink`` / ``downlink``
    alternating optimization, the tied ``simultaneous-*`` algorithm (the
    suffix picks which link's rate is reported), ``training`` (pilot based,
    ``pilots = 0`` meaning exact MMSE updates) or the ``capacity``
    reference. ``schedule`` runs the scheme on a uniformly random subset of
    that many users of a single cell.
    """
    label: str
    method: str = "uplink"
    structure: Kind = Kind.LINEAR
    rounds: int = 100
    pilots: int = 0
    mode: TrainingMode = None
    schedule: int = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        object.__setattr__(self, "structure", Kind(self.structure))
        if int(self.rounds) != self.rounds or self.rounds < 0:
            raise ConfigurationError("rounds must be a nonnegative integer")
        if int(self.pilots) != self.pilots or self.pilots < 0:
            raise ConfigurationError("pilots must be a nonnegative integer")
        if self.method != "capacity" and self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.method == "training":
            default = ("linear" if self.structure is Kind.LINEAR else "thp")
            mode = TrainingMode(self.mode or default)
            if (mode is TrainingMode.LINEAR) != (self.structure is Kind.LINEAR):
                raise ConfigurationError(
                    f"mode {mode.value} does not match {self.structure.value}")
            object.__setattr__(self, "mode", mode)
        if self.schedule is not None and self.schedule < 1:
            raise ConfigurationError("schedule must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologySpec
    snr_grid_db: tuple
    schemes: tuple
    trials: int = 1000
    seed: int = 0
    output: str = None
    user_noise_ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "snr_grid_db",
                           tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if not self.snr_grid_db or not self.schemes:
            raise ConfigurationError("SNR grid and scheme list must be nonempty")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigurationError("trials must be a positive integer")
        if not 0 <= int(self.seed) < 2 ** 63:
            raise ConfigurationError("seed must be a nonnegative integer")
        if not self.user_noise_ratio > 0:
            raise ConfigurationError("user_noise_ratio must be positive")
        labels = [s.label for s in self.schemes]
        if len(set(labels)) != len(labels):
            raise ConfigurationError("scheme labels must be unique")
        for s in self.schemes:
            single = self.topology.num_cells == 1
            if (s.method == "capacity" or s.schedule) and not single:
                raise ConfigurationError(
                    f"scheme {s.label!r} needs a single-cell topology")

    @classmethod
    def from_dict(cls, data):
        """Build from a JSON-style mapping (as read from ``--config``)."""
        data = dict(data)
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            data["topology"] = TopologySpec.from_dict(data["topology"])
            data["schemes"] = [Scheme(**s) for s in data["schemes"]]
            return cls(**data)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc

    def to_dict(self):
        return {
            "topology": self.topology.to_dict(),
            "snr_grid_db": list(self.snr_grid_db),
            "schemes": [{k: (v.value if hasattr(v, "value") else v)
                         for k, v in asdict(s).items()}
                        for s in self.schemes],
            "trials": self.trials,
            "seed": self.seed,
            "output": self.output,
            "user_noise_ratio": self.user_noise_ratio,
        }


@dataclass(frozen=True)
class ResultRecord:
    """Aggregated result of one (SNR, scheme) cell; rates are per cell."""
    snr_db: float
    scheme: str
    rounds: int
    pilots: int
    sum_rate_mean: float
    sum_rate_stderr: float
    sum_mse_mean: float
    trials: int


def _trial_seeds(seed, trial):
    """Independent 64-bit seeds for the channel and the scheme randomness."""
    state = np.random.SeedSequence([seed, trial]).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


def _evaluate(channels, scheme, scheme_seed):
    """Per-cell sum rate and sum MSE of one scheme on one realization."""
    spec = channels.spec
    kind = scheme.structure
    C = spec.num_cells
    if scheme.schedule is not None:
        rng = np.random.default_rng(scheme_seed)
        users = np.sort(rng.choice(spec.users_per_cell, scheme.schedule,
                                   replace=False))
        channels = channels.subset(users)
    if scheme.method == "capacity":
        return capacity_reference(channels, seed=scheme_seed), math.nan
    opt = OptimizerConfig(max_iters=scheme.rounds, rel_tol=1e-12,
                          structure=kind, capture_trajectory=False)
    if scheme.method == "uplink":
        bank = optimize_uplink(channels, opt).bank
        rates, mse = precoder_rates(channels, bank.v, kind)
    elif scheme.method == "downlink":
        bank = optimize_downlink(channels, opt).bank
        rates, mse = precoder_rates(channels, bank.t, kind,
                                    Direction.DOWNLINK)
    elif scheme.method.startswith("simultaneous"):
        opt = OptimizerConfig(max_iters=scheme.rounds, rel_tol=1e-12,
                              structure=kind, normalize_powers=True,
                              capture_trajectory=False)
        bank = optimize_simultaneous(channels, opt).bank
        if scheme.method.endswith("uplink"):
            rates, mse = precoder_rates(channels, bank.v, kind)
        else:
            rates, mse = precoder_rates(channels, bank.t, kind,
                                        Direction.DOWNLINK)
    else:
        cfg = TrainingConfig(n=max(scheme.pilots, 1), rounds=scheme.rounds,
                             mode=scheme.mode, seed=scheme_seed,
                             oracle_updates=scheme.pilots == 0)
        result = bidirectional_train(channels, cfg)
        rates, mse = precoder_rates(channels, result.bank.v, kind)
    return float(rates.sum()) / C, float(mse.sum()) / C


def _run_trial(config, trial):
    """All (SNR, scheme) values of one trial; ``None`` marks a failure."""
    channel_seed, scheme_seed = _trial_seeds(config.seed, trial)
    base = sample_channels(config.topology, channel_seed)
    power = float(np.mean(config.topology.user_powers))
    out = {}
    for snr in config.snr_grid_db:
        noise = power / 10.0 ** (snr / 10.0)
        channels = base.with_noise(noise, noise * config.user_noise_ratio)
        for scheme in config.schemes:
            try:
                out[snr, scheme.label] = _evaluate(channels, scheme,
                                                   scheme_seed)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                logger.error("trial %d, %s at %g dB failed: %s", trial,
                             scheme.label, snr, exc)
                out[snr, scheme.label] = None
    return out


def _run_trial_star(args):
    return _run_trial(*args)


def run_experiment(config, workers=1):
    """
    Run every (SNR, scheme, trial) combination and aggregate per cell.

    Results depend only on ``config`` (not on ``workers``). Failed trials
    are logged and excluded, so a record's ``trials`` counts successes.

    Returns
    -------
    list of ResultRecord
        Sorted by SNR, then by scheme position in the config.
    """
    jobs = [(config, t) for t in range(config.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial_star, jobs, chunksize=4))
    else:
        outcomes = [_run_trial(*job) for job in jobs]
    records = []
    for snr in config.snr_grid_db:
        for scheme in config.schemes:
            values = [o[snr, scheme.label] for o in outcomes
                      if o[snr, scheme.label] is not None]
            failed = config.trials - len(values)
            if failed:
                logger.warning("%s at %g dB: %d failed trials", scheme.label,
                               snr, failed)
            rates = np.array([v[0] for v in values])
            mses = np.array([v[1] for v in values])
            n = len(values)
            stderr = (float(rates.std(ddof=1) / np.sqrt(n)) if n > 1
                      else 0.0 if n == 1 else math.nan)
            records.append(ResultRecord(
                snr_db=snr, scheme=scheme.label,
                rounds=scheme.rounds, pilots=scheme.pilots,
                sum_rate_mean=float(rates.mean()) if n else math.nan,
                sum_rate_stderr=stderr,
                sum_mse_mean=float(mses.mean()) if n else math.nan,
                trials=n))
    return records


def _write_records(fh, records, metadata):
    for line in metadata or ():
        fh.write(f"# {line}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([repr(r.snr_db), r.scheme, r.rounds, r.pilots,
                         repr(r.sum_rate_mean), repr(r.sum_rate_stderr),
                         repr(r.sum_mse_mean), r.trials])


def emit_csv(records, path, metadata=None):
    """
    Write records as CSV (UTF-8, LF line endings, full-precision floats).

    ``path`` may also be an open text stream. ``metadata`` lines, if given,
    are written first as ``#`` comments.
    """
    records = list(records)
    if not records:
        raise ConfigurationError("no records to write")
    if hasattr(path, "write"):
        _write_records(path, records, metadata)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            _write_records(fh, records, metadata)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_csv(path):
    """Parse a file written by :func:`emit_csv`; comment lines are skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ConfigurationError(f"{path}: unexpected CSV header")
    return [ResultRecord(float(r[0]), r[1], int(r[2]), int(r[3]), float(r[4]),
                         float(r[5]), float(r[6]), int(r[7]))
            for r in rows[1:]]


SNR_GRID = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


def _oracle_pair(rounds_list, method="uplink"):
    out = []
    for kind, name in ((Kind.LINEAR, "linear"), (Kind.SUCCESSIVE, "nonlinear")):
        for rounds in rounds_list:
            out.append(Scheme(f"{name}-{rounds}it", method, kind, rounds))
    return out


def _trained_pair(pilots_list, rounds=2, kinds=(Kind.LINEAR, Kind.SUCCESSIVE)):
    out = []
    for kind in kinds:
        name = "linear" if kind is Kind.LINEAR else "nonlinear"
        for n in pilots_list:
            tag = f"{n}sym" if n else "mmse"
            out.append(Scheme(f"{name}-{tag}", "training", kind, rounds, n))
    return out


def _fig5_topology():
    return TopologySpec(users_per_cell=4, bts_antennas=4, user_antennas=2)


def _two_cell(K, N, N_k):
    return TopologySpec(users_per_cell=K, bts_antennas=N, user_antennas=N_k,
                        num_cells=2)


PRESETS = {
    "fig5a": lambda: (_fig5_topology(),
                      _oracle_pair((2, 100))
                      + [Scheme("capacity-ref", "capacity", rounds=0)]),
    "fig5b": lambda: (_fig5_topology(), _trained_pair((20, 0))),
    "fig5c": lambda: (_fig5_topology(),
                      _trained_pair((10, 20, 50, 100, 0),
                                    kinds=(Kind.SUCCESSIVE,))),
    "fig6": lambda: (
        TopologySpec(users_per_cell=4, bts_antennas=3, user_antennas=2),
        _oracle_pair((2, 100, 1000))
        + [Scheme("linear-3of4-100it", "uplink", Kind.LINEAR, 100,
                  schedule=3),
           Scheme("capacity-ref", "capacity", rounds=0)]),
    "fig7": lambda: (_fig5_topology(), [
        Scheme("separate-uplink", "uplink", Kind.SUCCESSIVE, 2),
        Scheme("separate-downlink", "downlink", Kind.SUCCESSIVE, 2),
        Scheme("simultaneous-uplink", "simultaneous-uplink",
               Kind.SUCCESSIVE, 2),
        Scheme("simultaneous-downlink", "simultaneous-downlink",
               Kind.SUCCESSIVE, 2)]),
    "fig8a": lambda: (_two_cell(2, 3, 2), _oracle_pair((2, 100, 1000))),
    "fig8b": lambda: (_two_cell(2, 3, 2), _trained_pair((20, 0))),
    "fig9": lambda: (_two_cell(3, 3, 3), _oracle_pair((2, 100, 1000))),
}


def preset(name, trials=1000, seed=0, snr_grid_db=SNR_GRID, output=None):
    """Experiment configuration for one of the named figure presets."""
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    topology, schemes = PRESETS[name]()
    return ExperimentConfig(topology, snr_grid_db, schemes, trials, seed,
                            output)
