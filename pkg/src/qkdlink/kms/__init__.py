"""Key management entity: lifecycle store, peer reservation protocol, and
an ETSI-014-style REST delivery surface."""

from .store import KeyState, KeyRecord, KeyStore, KmsError, UnknownKeyError, InsufficientKeysError
from .service import KmeService, KmeConfig, UnknownSaeError, InvalidSizeError
from .peer import LoopbackPeerLink, TcpPeerLink, PeerServer

__all__ = [
    "KeyState",
    "KeyRecord",
    "KeyStore",
    "KmsError",
    "UnknownKeyError",
    "InsufficientKeysError",
    "KmeService",
    "KmeConfig",
    "UnknownSaeError",
    "InvalidSizeError",
    "LoopbackPeerLink",
    "TcpPeerLink",
    "PeerServer",
]
