"""Hierarchical Bayesian inversion of multi-term time-fractional diffusion.

Modules:

- ``mesh``: lowest-order mixed finite elements on rectangular grids
- ``caputo``: two-term L1 time stepping
- ``gmsfem``: mixed multiscale reduction (snapshots, spectral basis, projection)
- ``fields``: KL parametrization, bounded transform, priors
- ``mapest``: sensitivities, augmented Tikhonov, IRLS
- ``sampling``: implicit sampling with tempered weights, pCN, LMAP
- ``diagnostics``: ACF/IACT, Gaussian-fit KL, moments, weight tables, bands
- ``model`` / ``experiment`` / ``cli``: forward maps, configs and pipelines
"""

__version__ = "0.1.0"
