"""Seed splitting.

Every random draw in the package comes from ``stream(seed, name)``. The stream
id is the CRC-32 of the UTF-8 stream name, so ``stream(7, "init")`` is a
``numpy.random.Generator`` seeded with ``SeedSequence(7, spawn_key=(crc32("init"),))``.
Streams with different names are statistically independent; the same
``(seed, name)`` pair always yields the same sequence.

Names used in the package: ``init`` (parameter initialization), ``data``
(training batches), ``eval`` (held-out batches), ``monitor`` (the fixed loss-logging batch),
``batch`` (toy-LM minibatch indices), ``dictionary`` (the planted feature
dictionary), ``bigram`` (toy-LM transition table), ``gradcheck`` (coordinate
sampling), ``ica`` (ICA initialization), ``verify`` (probe inputs) and
``analysis`` (activations regenerated by ``blc analyze``).
"""
import zlib

import numpy as np


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_id(name), *extra))
    return np.random.default_rng(ss)
