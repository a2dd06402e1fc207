"""Shared fixtures-by-construction for the test suite."""

import numpy as np

from rlsf.abtest import FlowPair
from rlsf.population import GroundTruthModel, quality_for_indicator
from rlsf.trajectory import Trajectory

SEQ_LEN = 6
VOCAB = 16


def planted(etas, kind="proportion", trait_std=0.0, noise_std=0.0, seq_len=SEQ_LEN, vocab=VOCAB):
    """Variants ``i`` (token ``i`` repeated) with true indicators exactly ``etas[i]``."""
    qs = [quality_for_indicator(e, kind, trait_std) for e in etas]
    uni = np.zeros(vocab)
    for i, q in enumerate(qs):
        uni[i] = (q - qs[0]) / seq_len
    model = GroundTruthModel(kind, qs[0], uni, np.zeros((vocab + 1, vocab)), trait_std, noise_std)
    variants = [Trajectory(0, (i,) * seq_len) for i in range(len(etas))]
    return variants, model


def planted_pair(eta1, eta2, **kw):
    (a, b), model = planted([eta1, eta2], **kw)
    return FlowPair(a, b), model
