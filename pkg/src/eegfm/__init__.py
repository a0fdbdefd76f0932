"""Desk-scale EEG representation learning: amplitude-aware masked
pretraining over a hierarchical two-stage-attention encoder with progressive
expert routing, lobe-pooled fine-tuning, and the accompanying signal
pipeline, metrics and training harness."""

__version__ = "0.1.0"
