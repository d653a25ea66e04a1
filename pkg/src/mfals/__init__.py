"""Rare-event probability estimation with multifidelity active learning.

Couples subset simulation with a per-sample fidelity decision: a cheap model
plus a Gaussian-process correction answers when its deviation measure says the
sign of the performance margin is trustworthy, and the expensive model is
called (and the correction retrained) otherwise.
"""

__version__ = "0.1.0"
