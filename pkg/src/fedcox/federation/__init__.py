"""K-center federation: protocol, transports, cohort and the GEL driver."""

from .center import CenterNode
from .cohort import (
    FederatedCohort,
    GelTrace,
    aggregate_gradient,
    baseline_estimators,
    debiased_lasso,
    gel_iterate,
    gradient_round,
    partition,
)
from .protocol import Message, decode_json, decode_message, encode_json, encode_message
from .transport import CommLog, InProcessTransport, StreamTransport

__all__ = [
    "CenterNode",
    "CommLog",
    "FederatedCohort",
    "GelTrace",
    "InProcessTransport",
    "Message",
    "StreamTransport",
    "aggregate_gradient",
    "baseline_estimators",
    "debiased_lasso",
    "decode_json",
    "decode_message",
    "encode_json",
    "encode_message",
    "gel_iterate",
    "gradient_round",
    "partition",
]
