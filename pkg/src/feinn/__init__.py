"""Neural networks trained through finite element residuals on adaptive meshes."""

__version__ = "0.1.0"
