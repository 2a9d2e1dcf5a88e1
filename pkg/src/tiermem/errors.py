"""Exception hierarchy shared by the engine, the peers and the simulator."""


class TierMemError(Exception):
    pass


class ConfigError(TierMemError, ValueError):
    """Invalid configuration value. ``line`` is set when it came from a file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TopologyError(TierMemError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TransportError(TierMemError):
    """The peer is failed or unreachable."""

    def __init__(self, message, peer_id=None):
        super().__init__(message)
        self.peer_id = peer_id


class MappingError(TierMemError):
    """Data operation on a block that is not mapped/allocated."""


class AllocationRefused(TierMemError):
    """A peer does not have a free slab worth of memory."""


class CapacityError(TierMemError):
    """Not enough peers to place a slab with the requested replication."""


class PoolExhausted(TierMemError):
    """No free, growable or reclaimable page left in the mempool."""


class BackpressureError(TierMemError):
    """The write path stalled and nothing could make progress."""


class AddressRangeError(TierMemError, IndexError):
    pass


class DataLossError(TierMemError):
    def __init__(self, page):
        super().__init__(f"page {page} was written but no copy survives")
        self.page = page


class ProtocolError(TierMemError):
    """Migration protocol used out of order."""
