"""Kinefit - model-based 3D hand-pose fitting from 2D and root-relative 3D joint predictions."""

__version__ = "0.1.0"
