"""Sim(3) tracking, keyframe graph optimisation and level-of-detail Gaussian mapping on CPU."""

__version__ = "0.1.0"
