"""Joint objective, the training loop and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import TrainingTriple, Vocabulary
from .discriminators import binary_cross_entropy
from .fusion import fused_target_prob
from .model import Batch, Variant, get_variant, make_batch, model_step, prepare_source, start_state
from .numerics import Tensor
from .seq2seq import ModelConfig, Params, init_params, leaves

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    flag: str = "final"
    lambda_global: float = 0.1
    lambda_local: float = 0.1
    batch_size: int = 16
    epochs: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6

    def __post_init__(self):
        get_variant(self.flag)
        if self.lambda_global < 0 or self.lambda_local < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")

    @classmethod
    def large(cls, **kw) -> "TrainConfig":
        """Batch size of the large-scale setup; pair with ModelConfig.large()."""
        return cls(batch_size=80, **kw)


@dataclass
class LossParts:
    total: Tensor
    nll: Tensor
    global_: Tensor | None = None
    local: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {"total": self.total.item(), "nll": self.nll.item()}
        if self.global_ is not None:
            out["global"] = self.global_.item()
        if self.local is not None:
            out["local"] = self.local.item()
        return out


class TrainingDiverged(RuntimeError):
    pass


def target_matches(batch: Batch, has_null: bool) -> np.ndarray:
    """(B, T, J) indicator that slot j holds the reference token of step t."""
    match = batch.ext[:, None, :] == batch.tgt_out[:, :, None]
    match &= batch.ext_mask[:, None, :] > 0
    if has_null:
        match[:, :, 0] = False
    return match.astype(nx.DTYPE)


def joint_loss(P: Params, batch: Batch, variant: Variant | str, lambda_global: float = 0.1,
               lambda_local: float = 0.1) -> LossParts:
    """Batch mean of -log P(Y | X, Y^E) + lambda_global loss^g + lambda_local loss^l.

    Terms whose mechanism is switched off by the variant are absent, so their
    networks receive no gradient.
    """
    variant = get_variant(variant)
    if batch.size == 0:
        raise ValueError("batch is empty")
    if variant.local and not variant.fusion:
        raise ValueError("the local loss needs the fusion mechanism")
    cache = prepare_source(P, variant, batch.src, batch.src_mask, batch.ext, batch.ext_mask,
                           batch.ext_labels, batch.ext_live)
    fusion = cache.ext is not None
    match = target_matches(batch, variant.null) if fusion else None
    s = start_state(P, cache)
    log_probs, betas = [], []
    for t in range(batch.tgt_in.shape[1]):
        out = model_step(P, variant, cache, batch.tgt_in[:, t], s)
        s = out.step.state
        p = nx.gather(out.p_base, batch.tgt_out[:, t])
        if fusion:
            p = fused_target_prob(p, out.q, out.beta, match[:, t], variant.null)
            betas.append(out.beta)
        log_probs.append(nx.log(nx.clip(p, PROB_FLOOR, 1.0)))
    tmask = batch.tgt_mask
    nll = -((nx.stack(log_probs, axis=1) * tmask).sum(axis=1).mean())
    parts = LossParts(nll, nll)
    total = nll
    if variant.global_mode == "learned":
        weights = batch.ext_mask.copy()
        if variant.null:
            weights[:, 0] = 0.0
        if batch.ext_live is not None:
            weights = weights * batch.ext_live
        parts.global_ = binary_cross_entropy(cache.D_words, batch.ext_labels, weights).mean()
        total = total + parts.global_ * lambda_global
    if variant.local:
        labels = match.max(axis=2)
        beta = nx.concat(betas, axis=1)
        parts.local = binary_cross_entropy(beta, labels, tmask).mean()
        total = total + parts.local * lambda_local
    parts.total = total
    return parts


def make_batches(n_items: int, lengths: Sequence[int], batch_size: int,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of roughly equal length (sorted within pools of 20 batches)."""
    order = rng.permutation(n_items)
    lengths = np.asarray(lengths)
    pool = batch_size * 20
    batches = []
    for start in range(0, n_items, pool):
        chunk = order[start: start + pool]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i: i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    trace: list[dict[str, float]] = field(default_factory=list)


def train(triples: Sequence[TrainingTriple], vocab: Vocabulary, model_cfg: ModelConfig,
          config: TrainConfig, params: dict[str, np.ndarray] | None = None,
          on_epoch: Callable[[int, dict[str, float]], None] | None = None) -> TrainResult:
    """Teacher-forced Adadelta training with global-norm clipping.

    Returns the trained parameters and one record of mean losses per epoch.
    """
    if not triples:
        raise ValueError("training corpus is empty")
    variant = get_variant(config.flag)
    params = init_params(model_cfg, config.seed) if params is None else params
    state = nx.AdadeltaState(rho=config.rho, eps=config.eps)
    rng = np.random.default_rng([config.seed, 7])
    lengths = [len(t.target) for t in triples]
    trace = []
    for epoch in range(config.epochs):
        sums: dict[str, float] = {}
        batches = make_batches(len(triples), lengths, config.batch_size, rng)
        for bi, idx in enumerate(batches):
            batch = make_batch([triples[i] for i in idx], vocab, variant)
            P = leaves(params)
            with nx.finite_checks(False):
                parts = joint_loss(P, batch, variant, config.lambda_global, config.lambda_local)
            values = parts.values()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDiverged(f"non-finite loss {values} at epoch {epoch}, batch {bi}")
            grads = nx.backward(parts.total)
            norm = nx.clip_grad_norm(grads, config.clip_norm)
            if not math.isfinite(norm):
                raise TrainingDiverged(f"non-finite gradient norm at epoch {epoch}, batch {bi}")
            nx.adadelta_step(params, grads, state)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {k: v / len(batches) for k, v in sums.items()}
        record["epoch"] = epoch + 1
        trace.append(record)
        log.info("epoch %d %s", epoch + 1, record)
        if on_epoch is not None:
            on_epoch(epoch + 1, record)
    return TrainResult(params, trace)


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"RFCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: dict
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> Variant:
        return get_variant(self.train_config.get("flag", "final"))


def config_digest(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: magic, version, JSON header, little-endian float32 arrays, CRC32."""
    names = sorted(ckpt.params)
    arrays = [np.ascontiguousarray(ckpt.params[n], dtype="<f4") for n in names]
    header = {
        "model_config": asdict(ckpt.model_config),
        "train_config": ckpt.train_config,
        "config_digest": config_digest(ckpt.train_config),
        "src_vocab": ckpt.src_vocab.to_list(),
        "tgt_vocab": ckpt.tgt_vocab.to_list(),
        "src_vocab_digest": ckpt.src_vocab.digest(),
        "tgt_vocab_digest": ckpt.tgt_vocab.digest(),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for a in arrays:
        buf.write(a.tobytes(order="C"))
    body = buf.getvalue()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, src_vocab: Vocabulary | None = None,
                    tgt_vocab: Vocabulary | None = None) -> Checkpoint:
    """Read and validate a checkpoint; optional vocabularies must match the stored digests."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    head = len(MAGIC) + 6
    if len(raw) < head + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<HI", body[len(MAGIC): head])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(body[head: head + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad header") from exc
    offset = head + hlen
    params = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        chunk = body[offset: offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: array {entry['name']} is truncated")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(nx.DTYPE)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    for which, given in (("src", src_vocab), ("tgt", tgt_vocab)):
        if given is not None and given.digest() != header[f"{which}_vocab_digest"]:
            raise CheckpointError(f"{path}: {which} vocabulary does not match the checkpoint "
                                  f"(digest {header[f'{which}_vocab_digest'][:12]})")
    return Checkpoint(params, ModelConfig(**header["model_config"]), header["train_config"],
                      Vocabulary.from_list(header["src_vocab"]),
                      Vocabulary.from_list(header["tgt_vocab"]), header.get("meta", {}))


# -- gradient check ------------------------------------------------------------------


def gradient_check(flag: str = "final", sample_count: int = 100, seed: int = 0,
                   batch_size: int = 3, epsilon: float = 1e-4) -> float:
    """Worst relative error of the joint-loss gradient on a tiny random model.

    Uses a handful of toy sentences with synthetic external words and a model
    with single-digit layer sizes, evaluated in float64.
    """
    from .data import ToyTaskSpec, build_vocabulary, encode_pairs, generate_toy_corpus, synthesize_dataset

    variant = get_variant(flag)
    spec = ToyTaskSpec(source_vocab_size=8, min_len=2, max_len=4, corpus_size=batch_size, seed=seed)
    pairs = generate_toy_corpus(spec)
    sv = build_vocabulary([s for s, _ in pairs], 100)
    tv = build_vocabulary([t for _, t in pairs], 100)
    triples = synthesize_dataset(encode_pairs(pairs, sv, tv), tv, seed=seed)
    cfg = ModelConfig(len(sv), len(tv), emb=4, hidden=3, attn=4, gate_hidden=3, disc_hidden=4)
    params = init_params(cfg, seed)
    # larger weights than the training init keep gradients well above rounding noise
    rng = np.random.default_rng([seed, 3])
    params = {k: rng.uniform(-0.5, 0.5, v.shape) for k, v in params.items()}
    batch = make_batch(triples, tv, variant)
    loss = lambda P: joint_loss(P, batch, variant, 0.1, 0.1).total
    return nx.finite_difference_check(loss, params, epsilon=epsilon, sample_count=sample_count, seed=seed)
