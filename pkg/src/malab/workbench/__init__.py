"""Persistence, metrics, experiment drivers, and the command-line interface."""
