"""Credit assignment in stochastic computation graphs."""
from .graph_core import Assignment, Graph, build_graph, forward_sample, load_graph

__all__ = ["Assignment", "Graph", "build_graph", "forward_sample", "load_graph"]
