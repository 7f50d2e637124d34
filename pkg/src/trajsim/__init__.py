"""Task-driven out-of-plane C-arm trajectory simulation.

Modules: ``geometry`` (poses, rays, grids), ``phantom`` (analytic scenes),
``projector`` (line integrals, Poisson counts), ``detectability`` (per-view d2),
``dataset`` (grid-scan corpora), ``surrogate`` (projection -> 11 d2 regressor),
``planner`` (greedy trajectory), ``recon`` (Siddon projector pair, CGLS),
``metrics`` and ``cli``.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
