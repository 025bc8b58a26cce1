"""Backdoor attack / mitigation toolkit for image classifiers (desk scale first)."""

__all__ = [
    "core",
    "adapters",
    "attacks",
    "models",
    "defenses",
    "engines",
]
