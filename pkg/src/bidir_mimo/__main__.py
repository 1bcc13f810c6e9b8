"""
Command-line experiment runner.

    python -m bidir_mimo --preset fig5a --trials 50 --out fig5a.csv
"""

import argparse
from dataclasses import replace
import json
import logging
import re
import sys

from .errors import ConfigurationError
from .harness import (PRESETS, ExperimentConfig, emit_csv, preset,
                      run_experiment)
from .training import TrainingMode

logger = logging.getLogger("bidir_mimo")


def build_parser():
    p = argparse.ArgumentParser(
        prog="bidir_mimo",
        description="Monte Carlo sum-rate sweeps for iterative MMSE "
                    "transceivers.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--config", help="JSON file mirroring ExperimentConfig")
    p.add_argument("--snr", type=float, nargs="+", metavar="DB",
                   help="SNR grid in dB")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--rounds", type=int,
                   help="forward-backward iterations for every scheme")
    p.add_argument("--pilots", type=int,
                   help="pilot length of training schemes (0 = MMSE updates)")
    p.add_argument("--mode", choices=[m.value for m in TrainingMode
                                      if m is not TrainingMode.LINEAR],
                   help="downlink training mode of nonlinear schemes")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _override_schemes(schemes, rounds=None, pilots=None, mode=None):
    """Apply CLI overrides; schemes that become duplicates are dropped."""
    out, seen = [], set()
    for s in schemes:
        label = s.label
        if rounds is not None and s.method != "capacity":
            s = replace(s, rounds=rounds)
            label = re.sub(r"\d+it\b", f"{rounds}it", label)
        if pilots is not None and s.method == "training":
            s = replace(s, pilots=pilots)
            tag = f"{pilots}sym" if pilots else "mmse"
            label = re.sub(r"(\d+sym|mmse)\b", tag, label)
        if (mode is not None and s.method == "training"
                and s.mode is not TrainingMode.LINEAR):
            s = replace(s, mode=TrainingMode(mode))
            if s.mode is TrainingMode.SEQUENTIAL:
                label += "-seq"
        if label not in seen:
            seen.add(label)
            out.append(replace(s, label=label))
    return out


def load_config(args):
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = ExperimentConfig.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config}: {exc}") from exc
    else:
        config = preset(args.preset)
    changes = {}
    if args.snr:
        changes["snr_grid_db"] = args.snr
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output"] = args.out
    if args.rounds is not None or args.pilots is not None or args.mode:
        changes["schemes"] = _override_schemes(config.schemes, args.rounds,
                                               args.pilots, args.mode)
    return replace(config, **changes) if changes else config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        records = run_experiment(config, workers=args.workers)
        metadata = [
            "snr_db = 10 log10(P_k / sigma^2); user noise = sigma^2 * "
            f"{config.user_noise_ratio}; rates in bits per cell",
            "config " + json.dumps(config.to_dict(), sort_keys=True),
        ]
        emit_csv(records, config.output or sys.stdout, metadata)
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
