"""Multi-Paxos with relay-based fan-out, a network simulator and a load model."""

from .core import Ballot, ClusterConfig, Command, ConfigError, Op, partition_followers
from .model import leader_load, follower_load, load_ratio, total_messages, validate_prc

__all__ = [
    "Ballot", "ClusterConfig", "Command", "ConfigError", "Op", "partition_followers",
    "leader_load", "follower_load", "load_ratio", "total_messages", "validate_prc",
]

__version__ = "0.1.0"
