"""Counter-keyed random streams.

Each draw site asks for ``generator(seed, stream, counter)``; the result is a
fresh Philox generator keyed by that triple, so randomness depends only on
what is being computed (step, example block) and never on call history.
"""
import numpy as np

DATA = 0
NOISE = 1
INIT = 2
SAMPLE = 3
EVAL = 4


def generator(seed, stream, counter=0):
    seq = np.random.SeedSequence([int(seed), int(stream), int(counter)])
    return np.random.Generator(np.random.Philox(seq))
