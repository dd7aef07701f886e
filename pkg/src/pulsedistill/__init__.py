"""Quality-aware PPG/ECG preprocessing, pseudo-labeling, and
self-distillation pretraining with a windowed sparse-attention encoder."""

__version__ = "0.1.0"
