"""Frozen deterministic text encoder.

Sentences are lowercased, split into alphanumeric word tokens, hashed into
a fixed number of count buckets with a seeded keyed hash, multiplied by a
frozen random projection, and L2-normalized. The projection entries are
drawn once from a seeded normal scaled by 1/sqrt(buckets); nothing in this
module ever receives a gradient.
"""

import hashlib
import re

import numpy as np

from .engine import DegenerateInputError

_WORD = re.compile(r"[a-z0-9]+")


class TextEmbedder:
    def __init__(self, dim=64, buckets=4096, seed=0):
        self.dim = int(dim)
        self.buckets = int(buckets)
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.projection = rng.standard_normal((self.buckets, self.dim)) / np.sqrt(self.buckets)
        self.projection.setflags(write=False)
        self._salt = self.seed.to_bytes(8, "little", signed=True)

    def _bucket(self, word):
        digest = hashlib.blake2b(word.encode(), digest_size=8, salt=self._salt).digest()
        return int.from_bytes(digest, "little") % self.buckets

    def embed_sentences(self, sentences):
        """Unit-norm embedding of a non-empty sentence group."""
        if not sentences:
            raise ValueError("cannot embed an empty sentence group")
        counts = {}
        for sentence in sentences:
            for word in _WORD.findall(sentence.lower()):
                b = self._bucket(word)
                counts[b] = counts.get(b, 0) + 1
        if not counts:
            raise DegenerateInputError("sentence group contains no word tokens")
        vec = np.zeros(self.dim)
        for b, c in counts.items():
            vec += c * self.projection[b]
        norm = np.linalg.norm(vec)
        if norm <= 1e-12:
            raise DegenerateInputError("hashed counts project to a near-zero vector")
        return vec / norm

    def embed_report(self, parsed):
        """One embedding per structure bucket; None where the bucket is empty."""
        return [self.embed_sentences(b) if b else None for b in parsed.buckets]
