"""Cuffless blood-pressure estimation with a Windkessel-constrained neural ODE.

Subpackages are plain modules:

- ``signals``: record IO, R-peak detection, beat segmentation, normalization
- ``windkessel``: three-element Windkessel simulator and synthetic data
- ``autodiff``: tape-based reverse-mode autodiff, grad check, RK4
- ``model``: LSTM encoder, parameter head, latent ODE, decoder
- ``train``: Adam training loop, evaluation and model comparison
- ``metrics``: MAE, Pearson r, BHS and AAMI grading
- ``cli``: the ``wkbp`` command
"""

__version__ = "0.1.0"
