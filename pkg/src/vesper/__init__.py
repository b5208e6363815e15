"""Vesper: a compact speech encoder adapted for emotion recognition.

The package is organised bottom-up:

- ``tensor``      reverse-mode autodiff on numpy arrays
- ``audio``       WAV decoding, framing, RMS energy, manifests
- ``masking``     energy- and pitch-guided mask placement
- ``encoder``     conv frontend + pre-norm Transformer, forward traces
- ``checkpoint``  binary serialization and student initialisation
- ``objectives``  hierarchical / cross-layer prediction losses
- ``trainer``     optimizers, LR schedule, training loops
- ``downstream``  weighted-layer classifier, metrics, k-fold protocol
- ``report``      CSV + figure rendering for runs
- ``cli``         the ``vesper`` command
"""

__version__ = "0.1.0"
