"""Experiment orchestration: configs, training schedule, metrics, comparisons and heatmaps."""
