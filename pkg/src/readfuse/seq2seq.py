"""Attention-based GRU encoder-decoder.

All functions work on batches: source ids are ``(B, I)`` with a 0/1 mask of
the same shape, decoder states are ``(B, hidden)`` and encoder states
``(B, I, 2 * hidden)``.  Parameters are passed as a mapping of named leaf
tensors (see :func:`leaves`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    emb: int = 32
    hidden: int = 64
    attn: int = 64
    gate_hidden: int = 32
    disc_hidden: int = 128
    max_len: int = 50

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"{k} must be positive, got {v}")

    @classmethod
    def large(cls, src_vocab: int, tgt_vocab: int) -> "ModelConfig":
        """Sizes used for the large-scale experiments (not exercised by tests)."""
        return cls(src_vocab, tgt_vocab, emb=512, hidden=1024, attn=1024, gate_hidden=512,
                   disc_hidden=512)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, H, A, G = cfg.emb, cfg.hidden, cfg.attn, cfg.gate_hidden
    shapes = {
        "src_emb": (cfg.src_vocab, E),
        "tgt_emb": (cfg.tgt_vocab, E),
        "init_W": (2 * H, H), "init_b": (H,),
        "att_Ws": (H, A), "att_Wh": (2 * H, A), "att_v": (A, 1),
        "dec_W": (E + 2 * H, 3 * H), "dec_U": (H, 3 * H), "dec_b": (3 * H,),
        "out_W": (E + 3 * H, H), "out_b": (H,),
        "voc_W": (H, cfg.tgt_vocab), "voc_b": (cfg.tgt_vocab,),
        # reading attention over external words
        "read_Wq": (3 * H, A), "read_Wk": (E, A), "read_v": (A, 1),
        # fusion gate / local discriminator
        "gate_W1": (3 * H + E, G), "gate_b1": (G,), "gate_W2": (G, 1), "gate_b2": (1,),
        # global discriminator
        "glob_Wq": (E, A), "glob_Wk": (2 * H, A), "glob_v": (A, 1),
        "glob_W1": (E + 4 * H, cfg.disc_hidden), "glob_b1": (cfg.disc_hidden,),
        "glob_W2": (cfg.disc_hidden, 1), "glob_b2": (1,),
    }
    for d in ("fw", "bw"):
        shapes[f"enc_{d}_W"] = (E, 3 * H)
        shapes[f"enc_{d}_U"] = (H, 3 * H)
        shapes[f"enc_{d}_b"] = (3 * H,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-0.08, 0.08) weights; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=nx.DTYPE)
        else:
            params[name] = nx.init_uniform(shape, rng)
    return params


def leaves(params: Mapping[str, np.ndarray], grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=grad, name=k) for k, v in params.items()}


def _check_ids(ids: np.ndarray, size: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise ValueError(f"{what} id out of range [0, {size})")


def gru_cell(x_proj: Tensor, h: Tensor, U: Tensor) -> Tensor:
    """One GRU transition given the input projection ``x W + b`` of width 3H."""
    H = h.shape[-1]
    hu = h @ U
    rz = nx.sigmoid(x_proj[:, : 2 * H] + hu[:, : 2 * H])
    r, z = rz[:, :H], rz[:, H:]
    n = nx.tanh(x_proj[:, 2 * H:] + r * hu[:, 2 * H:])
    return n + z * (h - n)


def _scan(P: Params, prefix: str, x: Tensor, mask: np.ndarray, reverse: bool) -> list[Tensor]:
    B, I, _ = x.shape
    H = P[f"{prefix}_U"].shape[0]
    proj = x @ P[f"{prefix}_W"] + P[f"{prefix}_b"]
    h = Tensor(np.zeros((B, H), dtype=x.data.dtype))
    states: list[Tensor] = [None] * I
    for t in (range(I - 1, -1, -1) if reverse else range(I)):
        new = gru_cell(proj[:, t], h, P[f"{prefix}_U"])
        m = mask[:, t: t + 1]
        # padded positions carry the previous state through unchanged
        h = new if m.all() else new * m + h * (1.0 - m)
        states[t] = h
    return states


def encode(P: Params, src: np.ndarray, src_mask: np.ndarray | None = None) -> Tensor:
    """Bidirectional GRU states H of shape (B, I, 2 * hidden)."""
    src = np.atleast_2d(np.asarray(src))
    if src.shape[1] == 0:
        raise ValueError("cannot encode an empty sentence")
    _check_ids(src, P["src_emb"].shape[0], "source")
    if src_mask is None:
        src_mask = np.ones(src.shape, dtype=nx.DTYPE)
    x = nx.embedding(P["src_emb"], src)
    fw = _scan(P, "enc_fw", x, src_mask, reverse=False)
    bw = _scan(P, "enc_bw", x, src_mask, reverse=True)
    return nx.concat([nx.stack(fw, axis=1), nx.stack(bw, axis=1)], axis=-1)


def masked_mean(H: Tensor, mask: np.ndarray) -> Tensor:
    m = mask[..., None].astype(H.data.dtype)
    return (H * m).sum(axis=1) * (1.0 / m.sum(axis=1))


def initial_state(P: Params, H: Tensor, src_mask: np.ndarray) -> Tensor:
    return nx.tanh(masked_mean(H, src_mask) @ P["init_W"] + P["init_b"])


def attend_source(P: Params, s: Tensor, H: Tensor, src_mask: np.ndarray,
                  H_keys: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Additive attention: returns (alpha (B, I), context (B, 2H))."""
    if H_keys is None:
        H_keys = H @ P["att_Wh"]
    B, I, _ = H.shape
    q = (s @ P["att_Ws"]).reshape(B, 1, -1)
    scores = (nx.tanh(H_keys + q) @ P["att_v"]).reshape(B, I)
    alpha = nx.softmax(scores, mask=src_mask)
    ctx = (alpha.reshape(B, 1, I) @ H).reshape(B, -1)
    return alpha, ctx


@dataclass
class DecoderStep:
    state: Tensor
    context: Tensor
    alpha: Tensor
    prev_emb: Tensor
    prev_ids: np.ndarray


def decoder_step(P: Params, y_prev: np.ndarray, s_prev: Tensor, H: Tensor, src_mask: np.ndarray,
                 H_keys: Tensor | None = None) -> DecoderStep:
    """Attend with the previous state, then advance the GRU on [E(y_prev); c_t]."""
    y_prev = np.asarray(y_prev)
    _check_ids(y_prev, P["tgt_emb"].shape[0], "target")
    e = nx.embedding(P["tgt_emb"], y_prev)
    alpha, ctx = attend_source(P, s_prev, H, src_mask, H_keys)
    x_proj = nx.concat([e, ctx], axis=-1) @ P["dec_W"] + P["dec_b"]
    s = gru_cell(x_proj, s_prev, P["dec_U"])
    return DecoderStep(s, ctx, alpha, e, y_prev)


def readout_logits(P: Params, step: DecoderStep) -> Tensor:
    hidden = nx.tanh(nx.concat([step.prev_emb, step.state, step.context], axis=-1) @ P["out_W"] + P["out_b"])
    return hidden @ P["voc_W"] + P["voc_b"]


def base_distribution(P: Params, step: DecoderStep) -> Tensor:
    """softmax(g(y_{t-1}, s_t, c_t)) over the target vocabulary, shape (B, V)."""
    return nx.softmax(readout_logits(P, step))
