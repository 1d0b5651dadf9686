"""Synthetic data, retrieval metrics, ablation sweeps and saliency export."""
