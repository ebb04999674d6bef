"""Surrogate-assisted GP for dynamic multi-mode project scheduling."""
