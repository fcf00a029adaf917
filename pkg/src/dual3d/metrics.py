"""Embedding-space metrics over rendered views and text prompts.

Works on externally produced embedding vectors; nothing here runs a neural
encoder.  Similarity is cosine scaled by 250 (the usual percentage scale
times 2.5), retrieval precision is strict: a tied top rank counts as a
miss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class EmbeddingSet:
    """Named embedding vectors, one row per item."""

    names: list
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.names = [str(n) for n in self.names]
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be (count, dim)")
        if len(self.names) != len(self.vectors):
            raise ValueError("one name per vector required")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("vectors must be finite")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0):
            raise ValueError("zero vectors have no direction")

    def __len__(self) -> int:
        return len(self.names)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, EmbeddingSet):
        x = x.vectors
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("embeddings must be (count, dim)")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings must be finite")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero vectors have no direction")
    return x / norms[:, None]


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities, (len(a), len(b))."""
    return _as_matrix(a) @ _as_matrix(b).T


def clip_similarity(image_embeddings, text_embeddings) -> float:
    """Mean of ``250 * cosine`` over every (image, text) pair."""
    return float(250.0 * cosine_matrix(image_embeddings,
                                       text_embeddings).mean())


def r_precision(image_embeddings, text_embeddings, matches) -> float:
    """Percentage of images whose matched text is the strict top-1 by
    cosine among all candidate texts.  Ties at the top count as misses."""
    sims = cosine_matrix(image_embeddings, text_embeddings)
    matches = np.asarray(matches)
    if matches.shape != (sims.shape[0],):
        raise ValueError("one matched text index per image required")
    if np.any(matches < 0) or np.any(matches >= sims.shape[1]):
        raise ValueError("matched text index out of range")
    hits = 0
    for i, m in enumerate(matches):
        target = sims[i, m]
        others = np.delete(sims[i], m)
        if others.size == 0 or target > others.max():
            hits += 1
    return 100.0 * hits / sims.shape[0]


def save_embeddings(path, embeddings: EmbeddingSet) -> None:
    """Write vectors as little-endian float32 plus a ``.json`` sidecar."""
    path = str(path)
    embeddings.vectors.astype("<f4").tofile(path)
    sidecar = {"names": embeddings.names, "dim": embeddings.vectors.shape[1]}
    with open(path + ".json", "w", encoding="utf-8") as fp:
        json.dump(sidecar, fp, sort_keys=True)
        fp.write("\n")


def load_embeddings(path) -> EmbeddingSet:
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as fp:
        meta = json.load(fp)
    data = np.fromfile(path, dtype="<f4")
    names = meta["names"]
    dim = int(meta["dim"])
    if data.size != len(names) * dim:
        raise ValueError("embedding blob size does not match its sidecar")
    return EmbeddingSet(names=names,
                        vectors=data.reshape(len(names), dim).astype(np.float64))
