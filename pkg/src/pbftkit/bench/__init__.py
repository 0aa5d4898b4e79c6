"""Benchmark harness: local clusters, workload drivers, and the CLI."""
