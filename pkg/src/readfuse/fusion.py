"""Reading and fusing a set of external target words at every decoding step.

External words for a batch are laid out as ids ``(B, J)`` with a 0/1 slot
mask.  When the ``<null>`` sink is enabled it occupies column 0 of every row.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .seq2seq import Params

DISCOUNT_MODES = ("literal", "log")
NORM_TOL = 1e-4


def external_keys(P: Params, ext_emb: Tensor) -> Tensor:
    return ext_emb @ P["read_Wk"]


def read_external(P: Params, s: Tensor, ctx: Tensor, ext_keys: Tensor, slot_mask: np.ndarray,
                  D: Tensor | np.ndarray | None = None, discount_mode: str = "literal") -> Tensor:
    """Attention q over external slots from the query [s_t; c_t], discounted by D.

    ``literal`` multiplies the raw attention scores by D before the softmax;
    ``log`` adds ln D, which scales each word's unnormalized weight by D.
    """
    if not np.asarray(slot_mask).any(axis=-1).all():
        raise ValueError("every row needs at least one external slot")
    B, J, _ = ext_keys.shape
    q = (nx.concat([s, ctx], axis=-1) @ P["read_Wq"]).reshape(B, 1, -1)
    raw = (nx.tanh(ext_keys + q) @ P["read_v"]).reshape(B, J)
    return attention_from_scores(raw, slot_mask, D, discount_mode)


def attention_from_scores(raw, slot_mask: np.ndarray, D=None, discount_mode: str = "literal") -> Tensor:
    if discount_mode not in DISCOUNT_MODES:
        raise ValueError(f"unknown discount mode {discount_mode!r}")
    if D is not None:
        if discount_mode == "literal":
            raw = raw * D
        else:
            raw = raw + nx.log(nx.clip(D, 1e-30, 1.0))
    return nx.softmax(raw, mask=slot_mask)


def external_context(q: Tensor, ext_emb: Tensor) -> Tensor:
    """c^E_t = sum_j q_j E(y_j), shape (B, emb); includes the ``<null>`` slot."""
    B, J = q.shape
    return (q.reshape(B, 1, J) @ ext_emb).reshape(B, -1)


def fusion_gate(P: Params, s: Tensor, ctx: Tensor, ext_ctx: Tensor) -> Tensor:
    """beta_t = sigmoid(FF([s_t; c_t; c^E_t])) with one tanh hidden layer, shape (B, 1)."""
    hidden = nx.tanh(nx.concat([s, ctx, ext_ctx], axis=-1) @ P["gate_W1"] + P["gate_b1"])
    return nx.sigmoid(hidden @ P["gate_W2"] + P["gate_b2"])


def _null_mass(q: Tensor, has_null: bool) -> Tensor | float:
    return q[:, 0:1] if has_null else 0.0


def copy_matrix(ext_ids: np.ndarray, slot_mask: np.ndarray, vocab_size: int, has_null: bool) -> np.ndarray:
    """(B, J, V) 0/1 map from slots to vocabulary ids; null and padding rows are empty."""
    B, J = ext_ids.shape
    M = np.zeros((B, J, vocab_size), dtype=nx.DTYPE)
    live = slot_mask > 0
    if has_null:
        live = live.copy()
        live[:, 0] = False
    b, j = np.nonzero(live)
    M[b, j, ext_ids[b, j]] = 1.0
    return M


def fuse(P_base: Tensor, q: Tensor, beta: Tensor, ext_ids: np.ndarray, slot_mask: np.ndarray,
         has_null: bool, check: bool = True) -> Tensor:
    """Full fused distribution (B, V).

    With null mass q0 and beta' = beta (1 - q0):
    P(y) = (1 - beta') P_base(y) + beta * sum over non-null slots j with id_j = y of q_j.
    Repeated ids add up; the null mass stays with the base distribution.
    """
    if check:
        for name, t in (("P_base", P_base), ("q", q)):
            dev = np.abs(t.data.sum(axis=-1) - 1.0).max()
            if dev > NORM_TOL:
                raise ValueError(f"{name} is not normalized (deviation {dev:.2e})")
    B, V = P_base.shape
    J = q.shape[1]
    M = copy_matrix(ext_ids, slot_mask, V, has_null)
    copied = (q.reshape(B, 1, J) @ M).reshape(B, V)
    keep = 1.0 - beta * (1.0 - _null_mass(q, has_null))
    return keep * P_base + beta * copied


def fused_target_prob(p_base_y: Tensor, q: Tensor, beta: Tensor, match: np.ndarray,
                      has_null: bool) -> Tensor:
    """The fused probability of one given token per row, (B,), without building the (B, V) table.

    ``match`` is the (B, J) indicator of slots whose id equals the token
    (null and padding excluded).
    """
    B = q.shape[0]
    copied = (q * match).sum(axis=-1)
    keep = 1.0 - beta * (1.0 - _null_mass(q, has_null))
    return keep.reshape(B) * p_base_y + beta.reshape(B) * copied
