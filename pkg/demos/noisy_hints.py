"""Train a reading-fusion model and watch it sort useful hints from noise.

    python3 demos/noisy_hints.py            # about 3 minutes on one core

The toy corpus maps each source word to a target lemma with two surface forms;
which form appears is only partly predictable.  External words can settle the
form, but most of them are junk.  We train the full model, then decode one
sentence with a clean hint set and with a noisy one.  Training needs about
seven epochs over 10k sentences before the discriminators wake up.

In the noisy set, watch for the other surface form of a lemma that is in the
sentence: it can pass the global discriminator and get copied.  That is the
main way low-quality hints hurt on this small vocabulary.
"""

import sys

from readfuse import data, evaluation as ev, seq2seq, training

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 8

spec = data.ToyTaskSpec(corpus_size=10_200)
pairs = data.generate_toy_corpus(spec)
sv = data.build_vocabulary([s for s, _ in pairs], 1000)
tv = data.build_vocabulary([t for _, t in pairs], 1000)
enc = data.encode_pairs(pairs, sv, tv)
train, test = enc[:10_000], enc[10_000:]
triples = data.synthesize_dataset(train, tv, seed=1)

cfg = seq2seq.ModelConfig(len(sv), len(tv))
tc = training.TrainConfig(flag="final", epochs=EPOCHS, lambda_global=1.0, lambda_local=1.0)
print(f"training the full model for {EPOCHS} epochs on {len(triples)} sentences")
res = training.train(triples, tv, cfg, tc,
                     on_epoch=lambda e, r: print(f"  epoch {e}: " + ", ".join(f"{k} {v:.2f}" for k, v in r.items()
                                                                              if k != "epoch")))

pair = test[0]
print("\nsource   ", " ".join(sv.decode(pair.source)))
print("reference", " ".join(tv.decode(pair.target)))
for p in (0.9, 0.1):
    ext = ev.ratio_external_sets([pair], tv, 1.0, p, seed=3)[0]
    out = ev.translate(res.params, "final", tv, [pair.source], [ext])[0]
    D = {w: round(float(d), 2) for w, d in zip(tv.decode(ext.words), out.global_scores)}
    print(f"\nhints with p-ratio {p}: {D}")
    print("  output ", " ".join(tv.decode(out.tokens)))
    print("  gate   ", " ".join(f"{b:.2f}" for b in out.betas))
