"""A streamlined, pipelined PBFT implementation with pluggable
cryptographic authentication policies, a deterministic network simulator
for Byzantine property testing, a TCP transport, and a benchmark harness.
"""

from .crypto import AuthScheme, CryptoMode, KeyStore, MessageClass, required_auth
from .replica import ProtocolOutput, Replica, ReplicaConfig, primary
from .simnet import SimConfig, World
from .wire import MessageKind, Request, WireEnvelope, decode, encode

__all__ = [
    "AuthScheme", "CryptoMode", "KeyStore", "MessageClass", "required_auth",
    "ProtocolOutput", "Replica", "ReplicaConfig", "primary",
    "SimConfig", "World",
    "MessageKind", "Request", "WireEnvelope", "decode", "encode",
]

__version__ = "0.1.0"
