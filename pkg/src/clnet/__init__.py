"""Clustering-learning networks: k-means filter banks, SAD filtering, a CNN baseline and a one-shot tracker."""
from .errors import (ClnetError, ConfigurationError, DataConsistencyError, FormatError, TrackerStateError,
                     UnsupportedOperationError)
from .layers import ConnectionTable, FilterBank, LayerParams, cl_layer_forward, cnn_layer_forward
from .network import (PRESETS, Network, NetworkSpec, build_clustered_network, build_network, forward_features,
                      load_network, predict, preset, save_network)

__version__ = "0.1.0"

__all__ = [
    "ClnetError", "ConfigurationError", "DataConsistencyError", "FormatError", "TrackerStateError",
    "UnsupportedOperationError", "ConnectionTable", "FilterBank", "LayerParams", "cl_layer_forward",
    "cnn_layer_forward", "PRESETS", "Network", "NetworkSpec", "build_clustered_network", "build_network",
    "forward_features", "load_network", "predict", "preset", "save_network",
]
