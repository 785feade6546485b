"""Counterfactual conversion-rate estimation over the entire exposure space.

Submodules: ``numeric`` (MLPs, losses, Adam), ``data`` (logs and spaces),
``simulator`` (ground-truth SCM), ``model`` (multi-task towers and
training), ``objectives``, ``counterfactual`` (label generation),
``evaluation`` (metrics and sweeps), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
