"""
Iterative MMSE transceiver design and bi-directional training for
multi-user MIMO cellular uplinks and downlinks.
"""

from .channel_model import (ChannelSet, TopologySpec, effective_channel,
                            sample_channels)
from .errors import (BiasDegenerateError, ConfigurationError,
                     InfeasiblePowerError, ShapeError)
from .mmse_core import (Direction, FilterBank, Kind, Structure,
                        downlink_rx_update, downlink_tx_update,
                        solve_multiplier, uplink_rx_update, uplink_tx_update)
from .objectives import (mmse_trace_spectrum, potential_pair, precoder_rates,
                         sum_mse, sum_rate_logdet, user_mse)
from .optimizer import (OptimizerConfig, capacity_reference,
                        optimize_downlink, optimize_simultaneous,
                        optimize_uplink)
from .training import TrainingConfig, TrainingMode, bidirectional_train

__all__ = ["ChannelSet", "TopologySpec", "effective_channel", "sample_channels",
           "BiasDegenerateError", "ConfigurationError",
           "InfeasiblePowerError", "ShapeError", "Direction", "FilterBank",
           "Kind", "Structure", "downlink_rx_update", "downlink_tx_update",
           "solve_multiplier", "uplink_rx_update", "uplink_tx_update",
           "mmse_trace_spectrum", "potential_pair", "precoder_rates",
           "sum_mse", "sum_rate_logdet", "user_mse", "OptimizerConfig",
           "capacity_reference", "optimize_downlink", "optimize_simultaneous",
           "optimize_uplink", "TrainingConfig", "TrainingMode",
           "bidirectional_train"]

__version__ = "0.1.0"
