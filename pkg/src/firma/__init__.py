"""Ring-topology personalized federated learning with Fibonacci gossip weights."""
from firma.data import LabeledDataset, PartitionSpec, partition
from firma.metrics import METHODS, RoundRecord, gini
from firma.protocols import ExperimentResult, ProtocolConfig, run_experiment
from firma.ring import fib_weights, mixing_matrix, two_opt

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset", "PartitionSpec", "partition", "METHODS", "RoundRecord", "gini",
    "ExperimentResult", "ProtocolConfig", "run_experiment", "fib_weights", "mixing_matrix",
    "two_opt",
]
