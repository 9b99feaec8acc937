"""Metastability of quasilinear parabolic equations with small diffusion."""
