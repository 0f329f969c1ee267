"""Command-line tooling for the vcluster orchestrator."""
