"""Desk-scale neural machine translation toolkit.

Trains and compares two finetuning regimes on the same bitext: translation
only, and translation plus a causal-language-modeling auxiliary objective
over source- and target-side monolingual text. Ships its own reverse-mode
autodiff, a configurable micro-transformer, beam decoding and smoothed BLEU.
"""

from minimt.autodiff import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "__version__"]
