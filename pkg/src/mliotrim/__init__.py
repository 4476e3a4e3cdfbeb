"""Detect and block non-essential traffic from smart-home devices at the gateway.

Pipeline: pcap capture -> per-(destination, window) feature vectors ->
consensus labels -> random forest / MLP classifier -> majority-vote
blocking with IP rules and DNS overrides.
"""

from .core import DestinationKey, KeyKind, Label, Prediction, Transport
from .features import FEATURE_NAMES, LAYOUT_HASH, N_FEATURES

__version__ = "0.1.0"

__all__ = [
    "DestinationKey",
    "FEATURE_NAMES",
    "KeyKind",
    "LAYOUT_HASH",
    "Label",
    "N_FEATURES",
    "Prediction",
    "Transport",
]
