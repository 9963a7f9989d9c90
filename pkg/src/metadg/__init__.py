"""Regularized fine-grained meta-learning for domain generalization.

Submodules: ``tensor`` (tape autodiff), ``nets`` (feature extractor, meta
learner, depth estimator), ``datagen`` (synthetic multi-domain data),
``metalearn`` (meta objective and training), ``metrics`` (ROC/AUC/HTER,
attention maps) and ``cli``.
"""

from .kernels import backend_name, use_backend

__version__ = "0.1.0"
__all__ = ["backend_name", "use_backend", "__version__"]
