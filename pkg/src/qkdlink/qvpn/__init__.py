"""Key-consuming encrypted tunnel fed from the ETSI-014 delivery API."""

from .frames import pack_frame, unpack_frame, FrameError, FRAME_TAG_BYTES
from .client import EtsiClient, KmsInsufficientKeys, KmsClientError
from .tunnel import Tunnel, TunnelConfig, SessionEpoch, TransferReport, TunnelError, ConfirmationError

__all__ = [
    "pack_frame",
    "unpack_frame",
    "FrameError",
    "FRAME_TAG_BYTES",
    "EtsiClient",
    "KmsInsufficientKeys",
    "KmsClientError",
    "Tunnel",
    "TunnelConfig",
    "SessionEpoch",
    "TransferReport",
    "TunnelError",
    "ConfirmationError",
]
