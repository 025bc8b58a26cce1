"""Engines: defense pipeline, evaluation, sweeps and the experiment cycle."""
