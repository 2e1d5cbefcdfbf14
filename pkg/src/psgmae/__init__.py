"""Single-channel PSG signal reconstruction toolkit.

EDF/EDF+ I/O, hypnogram-driven epoch preprocessing, a from-scratch
tensor/autodiff core, a masked autoencoder that reconstructs multiple
channels from one input channel, deterministic training, and per-sleep-stage
MSE reporting.
"""

__version__ = "0.1.0"
