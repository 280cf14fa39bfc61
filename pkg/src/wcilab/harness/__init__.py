"""Experiment surface: datasets, configuration, runs, correlation and plots."""
