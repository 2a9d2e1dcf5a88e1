"""User-space tiered memory engine with a simulated remote-memory cluster."""

from .bench import MetricsReport, run_experiment, run_scenario
from .clock import VirtualClock
from .cluster import Cluster, create_device
from .config import ScenarioConfig, load_config, parse_config
from .device import Device, DeviceConfig, DiskSink, FaultPolicy, TreeEntry
from .errors import (
    AddressRangeError,
    BackpressureError,
    CapacityError,
    ConfigError,
    DataLossError,
    MappingError,
    PoolExhausted,
    TierMemError,
    TopologyError,
    TransportError,
)
from .mempool import Mempool, PoolConfig, PoolPage
from .migration import MigrationManager, MigrationSession, State
from .placement import Placement
from .radix import RadixTree
from .remote import PeerNode
from .transport import InProcessTransport, LatencyModel, Transport
from .workload import Workload, WorkloadSpec, Zipf

__version__ = "0.1.0"
