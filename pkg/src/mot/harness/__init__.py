"""Experiment orchestration: synthetic tasks, parameter accounting, ablations."""
