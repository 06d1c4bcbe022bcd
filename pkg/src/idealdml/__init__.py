"""Deep metric learning with independent per-domain embeddings over exact 90-degree rotations.

Modules: ``autodiff`` (tensors and reverse-mode gradients), ``model``,
``transforms``, ``losses``, ``sampling``, ``trainer``, ``retrieval``,
``datasets``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
