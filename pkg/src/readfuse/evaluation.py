"""Beam search with fusion, BLEU, discriminator metrics and the ratio/scenario sweeps."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .data import (ExternalWordSet, NoiseConfig, NoisyLexicon, SentencePair, TrainingTriple, Vocabulary,
                   measure_ratios, sample_external_words, simulate_scenario)
from .model import (Variant, expand_cache, external_layout, get_variant, make_batch, model_step,
                    output_distribution, prepare_source, start_state)
from .numerics import Tensor
from .seq2seq import leaves

log = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    logp: float
    row: int = -1          # row in the current step's batch
    parent_row: int = -1   # row whose new state this hypothesis continues from
    finished: bool = False
    betas: tuple[float, ...] = ()

    def normalized(self) -> float:
        # finished hypotheses also paid for </s>
        return self.logp / max(1, len(self.tokens) + self.finished)


@dataclass
class DecodeResult:
    tokens: list[int]
    score: float
    finished: bool
    betas: list[float] = field(default_factory=list)
    global_scores: list[float] | None = None


def _batched_sources(sources: Sequence[Sequence[int]]):
    width = max(len(s) for s in sources)
    src = np.zeros((len(sources), width), dtype=np.int64)
    mask = np.zeros((len(sources), width), dtype=nx.DTYPE)
    for i, s in enumerate(sources):
        if not len(s):
            raise ValueError("cannot translate an empty sentence")
        src[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return src, mask


def beam_search(params: Mapping[str, np.ndarray], variant: Variant | str, vocab: Vocabulary,
                sources: Sequence[Sequence[int]],
                externals: Sequence[ExternalWordSet | None] | None = None,
                beam_width: int = 5, max_len: int | None = None, min_len: int = 1,
                references: Sequence[Sequence[int]] | None = None,
                force_gate_closed: bool = False) -> list[DecodeResult]:
    """Decode a batch of source sentences.

    Hypotheses are ranked by log probability divided by length.  At every step
    the 2K best expansions are examined: ``</s>`` endings that rank within the
    top K are set aside as finished, the best K others stay alive.  A sentence
    stops once K hypotheses have finished; at ``max_len`` every expansion is
    kept as a candidate and unfinished ones are flagged.  Global discriminator
    scores are computed once per sentence, before the first step.  Without
    ``max_len`` each sentence may run to twice its source length plus 10.

    ``references`` are only needed by the oracle-discriminator variant.
    ``force_gate_closed`` pins the fusion gate to 0 (the external path then has
    no effect on the output).
    """
    variant = get_variant(variant)
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    n = len(sources)
    if n == 0:
        return []
    # a per-sentence limit keeps results independent of how sentences are batched
    limits = [max_len or min(2 * len(s) + 10, 100) for s in sources]
    K = beam_width
    use_ext = variant.fusion and externals is not None
    with nx.no_grad():
        P = leaves(params, grad=False)
        src, src_mask = _batched_sources(sources)
        ext = ext_mask = labels = live = None
        if use_ext:
            if len(externals) != n:
                raise ValueError("one external word set per source sentence is required")
            ext, ext_mask, labels, live = external_layout(externals, variant.null, vocab.null_id, references)
        cache = prepare_source(P, variant, src, src_mask, ext, ext_mask, labels, live)
        gscores = None
        if cache.D_words is not None:
            off = 1 if variant.null else 0
            gscores = [cache.D_words.data[i, off: off + len(externals[i].words if externals[i] else ())].tolist()
                       for i in range(n)]
        s0 = start_state(P, cache).data

        blocked = np.zeros(len(vocab), dtype=bool)
        blocked[[vocab.pad_id, vocab.bos_id, vocab.unk_id, vocab.null_id]] = True
        live_hyps = [[Hypothesis((), 0.0)] for _ in range(n)]
        finished: list[list[Hypothesis]] = [[] for _ in range(n)]
        states = s0
        for t in range(max(limits)):
            active = [i for i in range(n) if live_hyps[i]]
            if not active:
                break
            row_sent, row_prev, row_state = [], [], []
            for i in active:
                for h in live_hyps[i]:
                    h.row = len(row_sent)
                    row_sent.append(i)
                    row_prev.append(h.tokens[-1] if h.tokens else vocab.bos_id)
                    row_state.append(states[h.parent_row] if h.parent_row >= 0 else s0[i])
            idx = np.array(row_sent)
            sub = expand_cache(cache, idx)
            out = model_step(P, variant, sub, np.array(row_prev), Tensor(np.stack(row_state)))
            if force_gate_closed and out.beta is not None:
                out.beta = Tensor(np.zeros_like(out.beta.data))
            dist = output_distribution(out, sub, variant).data
            logp = np.log(np.maximum(dist, 1e-30))
            logp[:, blocked] = -np.inf
            if t < min_len:
                logp[:, vocab.eos_id] = -np.inf
            betas = out.beta.data[:, 0] if out.beta is not None else None
            new_states = out.step.state.data
            for i in active:
                last = t == limits[i] - 1
                hyps = live_hyps[i]
                rows = np.array([h.row for h in hyps])
                scores = (np.array([h.logp for h in hyps])[:, None] + logp[rows]).ravel()
                order = np.argsort(-scores, kind="stable")
                if not last:
                    order = order[: 2 * K]
                V = logp.shape[1]
                kept = []
                for rank, flat in enumerate(order):
                    sc = scores[flat]
                    if sc == -np.inf:
                        break
                    h = hyps[flat // V]
                    tok = int(flat % V)
                    beta_trace = h.betas + ((float(betas[h.row]),) if betas is not None else ())
                    if tok == vocab.eos_id:
                        if rank < K or last:
                            finished[i].append(Hypothesis(h.tokens, float(sc), finished=True, betas=beta_trace))
                    elif last:
                        finished[i].append(Hypothesis(h.tokens + (tok,), float(sc), betas=beta_trace))
                    elif len(kept) < K:
                        kept.append(Hypothesis(h.tokens + (tok,), float(sc), parent_row=h.row, betas=beta_trace))
                done = sum(1 for f in finished[i] if f.finished) >= K
                live_hyps[i] = [] if (done or last) else kept
            states = new_states

    results = []
    for i in range(n):
        best = max(finished[i], key=lambda h: h.normalized())
        results.append(DecodeResult(list(best.tokens), best.normalized(), best.finished, list(best.betas),
                                    gscores[i] if gscores is not None else None))
    return results


def translate(params, variant, vocab: Vocabulary, sources, externals=None, batch_size: int = 64,
              **kw) -> list[DecodeResult]:
    """:func:`beam_search` over a corpus in length-sorted chunks; results keep input order."""
    order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
    out: list[DecodeResult | None] = [None] * len(sources)
    refs = kw.pop("references", None)
    for start in range(0, len(order), batch_size):
        chunk = order[start: start + batch_size]
        res = beam_search(params, variant, vocab, [sources[i] for i in chunk],
                          None if externals is None else [externals[i] for i in chunk],
                          references=None if refs is None else [refs[i] for i in chunk], **kw)
        for i, r in zip(chunk, res):
            out[i] = r
    return out


# -- BLEU -------------------------------------------------------------------------


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_order: int = 4, lowercase: bool = True) -> BleuReport:
    """Corpus BLEU with one reference per sentence, no smoothing.

    Orders for which the hypotheses contain no n-grams at all are left out of
    the geometric mean; any order with zero matches gives BLEU 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches, totals = [0] * max_order, [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        if lowercase:
            hyp = [w.lower() for w in hyp]
            ref = [w.lower() for w in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    used = [p for p, t in zip(precisions, totals) if t > 0]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if not used or min(used) == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in used) / len(used))
    return BleuReport(100.0 * score, precisions, bp, hyp_len, ref_len, matches, totals)


# -- discriminator metrics ----------------------------------------------------------


@dataclass
class DiscriminatorMetrics:
    precision: float
    recall: float
    f1: float
    count: int


def discriminator_metrics(scores: Sequence[float], labels: Sequence[float],
                          threshold: float = 0.5) -> DiscriminatorMetrics:
    """Precision/recall/F1 of the decision ``score >= threshold`` against 0/1 labels."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels) > 0.5
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    if not y.any():
        log.warning("no positive labels; recall reported as 0")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DiscriminatorMetrics(precision, recall, f1, len(s))


def global_scores(params, variant, vocab: Vocabulary, pairs: Sequence[SentencePair],
                  externals: Sequence[ExternalWordSet], batch_size: int = 64):
    """Learned D for every external word, flattened, with the matching reference labels."""
    variant = get_variant(variant)
    if variant.global_mode != "learned":
        raise ValueError(f"variant {variant.name!r} has no learned global discriminator")
    scores, labels = [], []
    with nx.no_grad():
        P = leaves(params, grad=False)
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start: start + batch_size]
            sets = externals[start: start + batch_size]
            src, src_mask = _batched_sources([p.source for p in chunk])
            ext, ext_mask, lab, live = external_layout(sets, variant.null, vocab.null_id, [p.target for p in chunk])
            cache = prepare_source(P, variant, src, src_mask, ext, ext_mask, lab, live)
            off = 1 if variant.null else 0
            for i, s in enumerate(sets):
                k = len(s.words)
                scores.extend(cache.D_words.data[i, off: off + k].tolist())
                labels.extend(lab[i, off: off + k].tolist())
    return np.array(scores), np.array(labels)


@dataclass
class NullMassReport:
    null_mass: float
    noise_mass: float  # mean attention per noise word
    steps: int


def null_mass_statistic(params, variant, vocab: Vocabulary, triples: Sequence[TrainingTriple],
                        batch_size: int = 64) -> NullMassReport:
    """Teacher-forced attention at steps where no external word equals the reference token.

    Compares the mass on ``<null>`` with the mass each noise word (one absent
    from the reference) receives at those steps.
    """
    variant = get_variant(variant)
    if not variant.null:
        raise ValueError(f"variant {variant.name!r} has no null slot")
    null_q, noise_q, steps = [], [], 0
    with nx.no_grad():
        P = leaves(params, grad=False)
        for start in range(0, len(triples), batch_size):
            batch = make_batch(triples[start: start + batch_size], vocab, variant)
            cache = prepare_source(P, variant, batch.src, batch.src_mask, batch.ext, batch.ext_mask,
                                   batch.ext_labels, batch.ext_live)
            noise = (batch.ext_mask > 0) & (batch.ext_labels < 0.5)
            noise[:, 0] = False
            s = start_state(P, cache)
            for t in range(batch.tgt_in.shape[1]):
                out = model_step(P, variant, cache, batch.tgt_in[:, t], s)
                s = out.step.state
                hit = (batch.ext == batch.tgt_out[:, t, None]) & (batch.ext_mask > 0)
                hit[:, 0] = False
                rows = (batch.tgt_mask[:, t] > 0) & ~hit.any(axis=1)
                q = out.q.data
                null_q.extend(q[rows, 0].tolist())
                noise_q.extend(q[rows][noise[rows]].tolist())
                steps += int(rows.sum())
    return NullMassReport(float(np.mean(null_q)) if null_q else float("nan"),
                          float(np.mean(noise_q)) if noise_q else float("nan"), steps)


# -- sweeps -----------------------------------------------------------------------


@dataclass
class SweepRow:
    model: str
    v_ratio: float | None
    p_ratio: float | None
    scenario: str | None
    bleu: float
    measured_v: float
    measured_p: float


@dataclass
class SweepReport:
    rows: list[SweepRow] = field(default_factory=list)

    def table(self) -> dict[tuple, float]:
        return {(r.model, r.scenario or (r.v_ratio, r.p_ratio)): r.bleu for r in self.rows}

    def to_text(self) -> str:
        head = ["model", "v_ratio", "p_ratio", "scenario", "bleu", "meas_v", "meas_p"]
        fmt = lambda x: "-" if x is None else (f"{x:.2f}" if isinstance(x, float) else str(x))
        lines = [[fmt(getattr(r, k)) for k in ("model", "v_ratio", "p_ratio", "scenario", "bleu",
                                                "measured_v", "measured_p")] for r in self.rows]
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
        out = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        out += ["  ".join(c.ljust(w) for c, w in zip(l, widths)) for l in lines]
        return "\n".join(out) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.rows)


@dataclass
class ModelEntry:
    params: Mapping[str, np.ndarray]
    variant: Variant


def _score(entry: ModelEntry, vocab: Vocabulary, pairs: Sequence[SentencePair], sets, beam_width: int) -> float:
    refs = [p.target for p in pairs]
    res = translate(entry.params, entry.variant, vocab, [p.source for p in pairs],
                    sets if entry.variant.fusion else None, beam_width=beam_width, references=refs)
    return bleu([vocab.decode(r.tokens) for r in res], [vocab.decode(t) for t in refs]).bleu


def _mean_ratios(sets, pairs):
    vr = [measure_ratios(s, p) for s, p in zip(sets, pairs)]
    return float(np.mean([v for v, _ in vr])), float(np.mean([p for _, p in vr]))


def ratio_external_sets(pairs: Sequence[SentencePair], vocab: Vocabulary, v_ratio: float,
                        p_ratio: float, seed: int) -> list[ExternalWordSet]:
    rng = np.random.default_rng([seed, int(round(v_ratio * 1000)), int(round(p_ratio * 1000))])
    return [sample_external_words(p, vocab, v_ratio, zeta=p_ratio, rng=rng) for p in pairs]


def sweep(models: Mapping[str, ModelEntry], pairs: Sequence[SentencePair], vocab: Vocabulary,
          grid: Sequence[tuple[float, float]] = (), scenarios: Sequence[str] = (),
          lexicon: NoisyLexicon | None = None, src_vocab: Vocabulary | None = None,
          noise: NoiseConfig = NoiseConfig(), seed: int = 0, beam_width: int = 5) -> SweepReport:
    """BLEU for every model on every (v_ratio, p_ratio) cell and every scenario.

    Ratio cells use a fixed share of positives (zeta = p_ratio).  All models
    see the same external sets in a cell.
    """
    for name, entry in models.items():
        if entry is None or entry.params is None:
            raise ValueError(f"no trained parameters for model {name!r}")
    report = SweepReport()
    for v, p in grid:
        sets = ratio_external_sets(pairs, vocab, v, p, seed)
        mv, mp = _mean_ratios(sets, pairs)
        for name, entry in models.items():
            report.rows.append(SweepRow(name, v, p, None, _score(entry, vocab, pairs, sets, beam_width), mv, mp))
    for k, scen in enumerate(scenarios):
        if src_vocab is None:
            raise ValueError("scenario sweeps need the source vocabulary")
        rng = np.random.default_rng([seed, 99, k])
        sets = [simulate_scenario(p, scen, lexicon, src_vocab, vocab, noise, seed=rng.integers(2**31))
                for p in pairs]
        mv, mp = _mean_ratios(sets, pairs)
        for name, entry in models.items():
            report.rows.append(SweepRow(name, None, None, scen, _score(entry, vocab, pairs, sets, beam_width), mv, mp))
    return report
