"""Elastic virtual cluster orchestrator."""
