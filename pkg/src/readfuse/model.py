"""Model variants, batch layout and the shared per-step computation.

A variant switches the external-word machinery on piece by piece, from the
plain encoder-decoder (``baseline``) to the full model (``final``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import ExternalWordSet, TrainingTriple, Vocabulary
from .discriminators import global_discriminate, global_labels
from .fusion import external_context, external_keys, fuse, fusion_gate, read_external
from .numerics import Tensor
from .seq2seq import DecoderStep, Params, base_distribution, decoder_step, encode, initial_state


@dataclass(frozen=True)
class Variant:
    name: str
    fusion: bool = True
    global_mode: str | None = None  # None, "learned" or "oracle"
    local: bool = False
    null: bool = False
    discount_mode: str = "literal"


VARIANTS = {
    "baseline": Variant("baseline", fusion=False),
    "basic": Variant("basic"),
    "+global-oracle": Variant("+global-oracle", global_mode="oracle"),
    "+global": Variant("+global", global_mode="learned"),
    "+local": Variant("+local", local=True),
    "+null": Variant("+null", null=True),
    "+local+null": Variant("+local+null", local=True, null=True),
    "final": Variant("final", global_mode="learned", local=True, null=True),
}


def get_variant(flag: str | Variant) -> Variant:
    if isinstance(flag, Variant):
        return flag
    try:
        return VARIANTS[flag]
    except KeyError:
        raise ValueError(f"unknown model flag {flag!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass
class Batch:
    src: np.ndarray          # (B, I) ids, padded
    src_mask: np.ndarray     # (B, I)
    tgt_in: np.ndarray       # (B, T) <s> y_1 .. y_T
    tgt_out: np.ndarray      # (B, T) y_1 .. y_T </s>
    tgt_mask: np.ndarray     # (B, T)
    ext: np.ndarray | None = None       # (B, J) external ids, null in column 0 when enabled
    ext_mask: np.ndarray | None = None  # (B, J)
    ext_live: np.ndarray | None = None  # (B, 1) 0 for rows with no external slot
    ext_labels: np.ndarray | None = None  # (B, J) membership in the reference (null: 1)

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(rows: Sequence[Sequence[int]], fill: int = 0) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max(len(r) for r in rows))
    ids = np.full((len(rows), width), fill, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=nx.DTYPE)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def external_layout(sets: Sequence[ExternalWordSet | None], null: bool, null_id: int,
                    targets: Sequence[Sequence[int]] | None = None):
    """Pack external word sets into padded (ids, mask, labels, live) arrays."""
    rows = []
    for s in sets:
        words = list(s.words) if s is not None else []
        rows.append(([null_id] if null else []) + words)
    ids, mask = _pad(rows)
    # a row without any slot gets one dummy slot; its gate is closed in model_step
    mask[mask.sum(axis=1) == 0, 0] = 1.0
    labels = None
    if targets is not None:
        labels = np.zeros(ids.shape, dtype=nx.DTYPE)
        for i, (row, tgt) in enumerate(zip(rows, targets)):
            labels[i, : len(row)] = global_labels(row, tgt)
            if null:
                labels[i, 0] = 1.0
    live = np.array([[1.0 if row else 0.0] for row in rows], dtype=nx.DTYPE)
    return ids, mask, labels, live


def make_batch(triples: Sequence[TrainingTriple], vocab: Vocabulary, variant: Variant) -> Batch:
    if not triples:
        raise ValueError("batch is empty")
    src, src_mask = _pad([t.source for t in triples])
    tgt_in, tgt_mask = _pad([(vocab.bos_id,) + tuple(t.target) for t in triples])
    tgt_out, _ = _pad([tuple(t.target) + (vocab.eos_id,) for t in triples])
    batch = Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)
    if variant.fusion:
        batch.ext, batch.ext_mask, batch.ext_labels, batch.ext_live = external_layout(
            [t.external for t in triples], variant.null, vocab.null_id, [t.target for t in triples])
    return batch


@dataclass
class SourceCache:
    """Everything computed once per source sentence before decoding."""

    H: Tensor
    H_keys: Tensor
    src_mask: np.ndarray
    ext: np.ndarray | None = None
    ext_mask: np.ndarray | None = None
    ext_emb: Tensor | None = None
    ext_keys: Tensor | None = None
    ext_live: np.ndarray | None = None
    D: Tensor | np.ndarray | None = None  # discount per slot (null pinned to 1)
    D_words: Tensor | None = None  # learned scores for real words, (B, J)


def prepare_source(P: Params, variant: Variant, src: np.ndarray, src_mask: np.ndarray,
                   ext: np.ndarray | None = None, ext_mask: np.ndarray | None = None,
                   ext_labels: np.ndarray | None = None,
                   ext_live: np.ndarray | None = None) -> SourceCache:
    H = encode(P, src, src_mask)
    cache = SourceCache(H, H @ P["att_Wh"], src_mask)
    if not variant.fusion or ext is None:
        return cache
    cache.ext, cache.ext_mask = ext, ext_mask
    if ext_live is not None and not ext_live.all():
        cache.ext_live = ext_live
    cache.ext_emb = nx.embedding(P["tgt_emb"], ext)
    cache.ext_keys = external_keys(P, cache.ext_emb)
    if variant.global_mode == "learned":
        D = global_discriminate(P, cache.ext_emb, H, src_mask)
        cache.D_words = D
        if variant.null:
            pin = np.zeros(ext.shape, dtype=D.data.dtype)
            pin[:, 0] = 1.0
            D = D * (1.0 - pin) + pin
        cache.D = D
    elif variant.global_mode == "oracle":
        if ext_labels is None:
            raise ValueError("oracle discrimination needs reference labels")
        cache.D = ext_labels
    return cache


@dataclass
class StepOutput:
    step: DecoderStep
    p_base: Tensor
    q: Tensor | None = None
    beta: Tensor | None = None


def model_step(P: Params, variant: Variant, cache: SourceCache, y_prev: np.ndarray,
               s_prev: Tensor) -> StepOutput:
    step = decoder_step(P, y_prev, s_prev, cache.H, cache.src_mask, cache.H_keys)
    out = StepOutput(step, base_distribution(P, step))
    if cache.ext is not None:
        out.q = read_external(P, step.state, step.context, cache.ext_keys, cache.ext_mask,
                              cache.D, variant.discount_mode)
        ext_ctx = external_context(out.q, cache.ext_emb)
        out.beta = fusion_gate(P, step.state, step.context, ext_ctx)
        if cache.ext_live is not None:
            out.beta = out.beta * cache.ext_live
    return out


def output_distribution(out: StepOutput, cache: SourceCache, variant: Variant) -> Tensor:
    if out.q is None:
        return out.p_base
    return fuse(out.p_base, out.q, out.beta, cache.ext, cache.ext_mask, variant.null, check=False)


def start_state(P: Params, cache: SourceCache) -> Tensor:
    return initial_state(P, cache.H, cache.src_mask)


def expand_cache(cache: SourceCache, index: np.ndarray) -> SourceCache:
    """Repeat cached rows (e.g. once per beam); only valid outside gradient recording."""
    take = lambda t: None if t is None else (Tensor(t.data[index]) if isinstance(t, Tensor) else t[index])
    return SourceCache(take(cache.H), take(cache.H_keys), cache.src_mask[index], take(cache.ext),
                       take(cache.ext_mask), take(cache.ext_emb), take(cache.ext_keys),
                       take(cache.ext_live), take(cache.D), take(cache.D_words))

