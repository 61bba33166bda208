"""Exception hierarchy shared across the stack."""


class OppMeshError(Exception):
    """Base class for all errors raised by this package."""


class PayloadSizeError(OppMeshError, ValueError):
    """Payload outside the size bounds accepted by a layer."""


class FrameDecodeError(OppMeshError, ValueError):
    """A byte sequence could not be decoded as a frame."""


class IncompleteMessageError(OppMeshError):
    """A segment set is missing one or more segments."""


class LengthMismatchError(OppMeshError):
    """Reassembled data length disagrees with the declared total length."""


class TransportError(OppMeshError):
    """The underlying byte port is closed or unusable."""


class AddressError(OppMeshError, ValueError):
    """Invalid or colliding mesh address."""


class NegotiationError(OppMeshError):
    """Protocol negotiation terminated or found no common protocol."""


class HandshakeError(OppMeshError):
    """Key agreement failed or a confirmation tag did not verify."""


class SecureChannelError(OppMeshError):
    """Authenticated decryption failed or a record replayed."""


class ConnectionFailed(OppMeshError):
    """Connection-level failure (stage recorded in args)."""


class PeerLookupError(OppMeshError, LookupError):
    """Peer id not present in the routing table."""


class ScenarioError(OppMeshError, ValueError):
    """Scenario configuration file is missing or inconsistent."""
