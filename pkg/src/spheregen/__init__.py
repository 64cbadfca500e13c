"""Generative models for directional data on the unit hypersphere.

Submodules: ``geometry`` (spherical coordinates, geodesics), ``datagen``
(copula/margin simulation), ``vmf`` (von Mises-Fisher mixtures),
``neuralnet`` (numpy MLP + Adam), ``flowmatch`` (spherical flow matching),
``gan`` (GAN on angles), ``evaluation`` (circular CRPS and diagnostics),
``config`` / ``pipeline`` / ``cli`` (experiment orchestration).
"""

__version__ = "0.1.0"
