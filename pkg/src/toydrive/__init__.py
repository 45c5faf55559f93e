"""Desk-scale geometry-conditioned multi-view street diffusion."""
