"""Multilevel language-embedded Gaussian feature fields.

Build object- and part-level semantic fields over 3D Gaussian scenes from
ingested masks and embeddings, answer open-vocabulary queries with
pixel-aligned masks, and drive an interactive navigation agent over HTTP.
"""

__version__ = "0.1.0"
