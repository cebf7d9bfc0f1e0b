"""Seed derivation and named PCG64 streams.

Conventions (all deterministic and platform independent):

* repetition seeds are plain integer addition: ``seed_base + repetition_index``;
* purpose-specific streams are PCG64 generators seeded by a ``SeedSequence``
  over ``(seed, sha256(tag) words)``, so adding a new named stream (or a new
  parameter to a model) never shifts the draws of existing ones;
* ensemble member seeds hash ``(seed, view name)`` down to 63 bits so members
  can be retrained in isolation with the exact same integer seed.
"""
from __future__ import annotations

import hashlib

import numpy as np


def rep_seed(seed_base: int, rep: int) -> int:
    return int(seed_base) + int(rep)


def _tag_words(tag: str) -> list[int]:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def named_stream(seed: int, tag: str) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + _tag_words(tag)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def member_seed(seed: int, view: str) -> int:
    digest = hashlib.sha256(f"member/{int(seed)}/{view}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
