"""Poison recognition and calibrated noise."""
