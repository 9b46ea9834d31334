"""Traffic-assignment laboratory: UE solver, scenario generator and a graph-attention surrogate."""

__version__ = "0.1.0"
