"""Simulation harness: cluster, workloads, oracle, baseline and search."""
