"""Datasets, baseline training, checkpoints, reports, and ablation drivers."""
