"""Deterministic hash-based text encoder producing 768-wide token sequences.

Stands in for a pretrained language encoder at desk scale: each token maps to
a fixed unit-norm vector drawn from a generator seeded by the token's hash, so
embeddings are identical across runs, machines, and processes. A reserved null
row (hashed from a key outside the token alphabet) serves as the unconditional
context for classifier-free guidance.
"""

from __future__ import annotations

import hashlib
import json
import re

import numpy as np

EMBED_DIM = 768

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_NULL_KEY = b"\x00unconditional\x00"


def tokenize(prompt: str) -> list[str]:
    """Lowercase and split on anything outside [a-z0-9]."""
    return _TOKEN_RE.findall(prompt.lower())


def _hashed_row(key: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    g = np.random.Generator(np.random.PCG64(seed))
    v = g.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


class HashTextEncoder:
    """Maps prompts to (n, 768) float32 token sequences, order-preserving."""

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}
        self._null = _hashed_row(_NULL_KEY, dim)

    def token_vector(self, token: str) -> np.ndarray:
        if token not in self._cache:
            # token keys are utf-8 of [a-z0-9]+ strings, disjoint from _NULL_KEY
            self._cache[token] = _hashed_row(token.encode("utf-8"), self.dim)
        return self._cache[token]

    def encode(self, prompt: str) -> np.ndarray:
        tokens = tokenize(prompt)
        if not tokens:
            return self.null_embedding()
        return np.stack([self.token_vector(tok) for tok in tokens])

    def null_embedding(self) -> np.ndarray:
        """(1, 768) reserved unconditional row, stable for this instance."""
        return self._null[None, :].copy()


def read_prompts(path) -> list[dict]:
    """Read a JSONL prompt file; each record carries at least id and prompt."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "id" not in rec or "prompt" not in rec:
                raise ValueError(f"{path}:{line_no + 1}: prompt record needs id and prompt")
            records.append(rec)
    return records


def write_prompts(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
