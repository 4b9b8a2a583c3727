"""Global word discriminator and the two supervised discrimination losses."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .seq2seq import Params, masked_mean

CLAMP = 1e-7


def source_summary(H: Tensor, src_mask: np.ndarray | None = None) -> Tensor:
    """z = mean of the encoder states over real source positions, (B, 2H)."""
    if H.shape[1] == 0:
        raise ValueError("encoder states are empty")
    if src_mask is None:
        src_mask = np.ones(H.shape[:2], dtype=nx.DTYPE)
    return masked_mean(H, src_mask)


def global_discriminate(P: Params, word_emb: Tensor, H: Tensor, src_mask: np.ndarray) -> Tensor:
    """D in (0, 1) for every external word: (B, J, E) embeddings -> (B, J).

    The word attends over the source states to build c^D_j, and
    D = sigmoid(FF([E(y_j); z; c^D_j])).  The hidden layer is rectified: the
    decision depends on an interaction between the word and the sentence, and
    a tanh layer at small initial weights is too close to linear to find it.
    """
    B, J, _ = word_emb.shape
    I = H.shape[1]
    qk = (word_emb @ P["glob_Wq"]).reshape(B, J, 1, -1)
    hk = (H @ P["glob_Wk"]).reshape(B, 1, I, -1)
    scores = (nx.tanh(qk + hk) @ P["glob_v"]).reshape(B, J, I)
    alpha = nx.softmax(scores, mask=np.broadcast_to(src_mask[:, None, :], (B, J, I)))
    c_d = alpha @ H
    z = source_summary(H, src_mask).reshape(B, 1, -1) * np.ones((1, J, 1), dtype=H.data.dtype)
    hidden = nx.relu(nx.concat([word_emb, z, c_d], axis=-1) @ P["glob_W1"] + P["glob_b1"])
    return nx.sigmoid(hidden @ P["glob_W2"] + P["glob_b2"]).reshape(B, J)


def global_labels(words: Iterable[int], target: Sequence[int]) -> np.ndarray:
    """b = 1 iff the external word occurs in the reference."""
    ref = set(target)
    return np.array([1.0 if w in ref else 0.0 for w in words], dtype=nx.DTYPE)


def local_labels(target: Sequence[int], external_words: Iterable[int]) -> np.ndarray:
    """b(y_t) = 1 iff y_t is one of the external words (``<null>`` excluded by the caller)."""
    ext = set(external_words)
    return np.array([1.0 if y in ext else 0.0 for y in target], dtype=nx.DTYPE)


def binary_cross_entropy(p, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Summed -b log p - (1 - b) log(1 - p) with p clamped to [1e-7, 1 - 1e-7].

    ``weights`` (0/1) drops padded entries; leading dimensions other than the
    last are kept, so a (B, J) input yields a (B,) loss.
    """
    p = nx.clip(p, CLAMP, 1.0 - CLAMP)
    labels = np.asarray(labels, dtype=p.data.dtype)
    if labels.shape != p.shape:
        raise ValueError(f"labels shape {labels.shape} does not match predictions {p.shape}")
    terms = nx.log(p) * (-labels) + nx.log(1.0 - p) * (labels - 1.0)
    if weights is not None:
        terms = terms * weights
    return terms.sum(axis=-1)


def global_loss(D, labels) -> Tensor:
    """loss^g summed over the external words of one sentence (or per row of a batch)."""
    return binary_cross_entropy(D, labels)


def local_labels_and_loss(beta, target: Sequence[int], external_words: Iterable[int]) -> Tensor:
    """loss^l summed over decoding steps for one sentence; ``beta`` has one entry per target token."""
    if len(target) == 0:
        raise ValueError("target sentence is empty")
    return binary_cross_entropy(beta, local_labels(target, external_words))
