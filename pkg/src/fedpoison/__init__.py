"""Federated-learning poisoning testbed.

Local MLP training on partitioned intrusion-detection style data, FedAvg and
Byzantine-robust aggregation, a label-flipping attack on one client, and a
length-prefixed TCP protocol for running the same experiment across processes.
"""

from fedpoison.errors import ConfigError, DataError, FedPoisonError, ProtocolError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FedPoisonError", "ProtocolError", "__version__"]
