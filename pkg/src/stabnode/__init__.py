"""Stabilized neural ODEs for dissipative PDEs.

Learn du/dt as an explicit linear operator plus a nonlinear correction,
with pseudospectral ground-truth solvers, training by reverse-mode
differentiation through a fixed-step integrator, eigenbasis reduced-order
models, and attractor statistics.
"""

__version__ = "0.1.0"
