"""Adversarial Machine UNlearning toolkit.

Training and differentiation of small classifiers, minimal-radius L2
attacks, the adversarial fine-tuning unlearner plus standard baselines,
shadow-model membership-inference evaluation, a convex bound verifier, and
an experiment harness with a CLI.
"""

from .backends import active_backend

__version__ = "0.1.0"
__all__ = ["active_backend", "__version__"]
