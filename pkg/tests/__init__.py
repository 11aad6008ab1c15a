"""
Tests for ddpflow

Covers the network model, the DistFlow oracle, trajectory datasets and
Hankel systems, the conic layer, the data-driven power flow programs,
network reduction and placement, configuration, the pipeline and the
command line.
"""
