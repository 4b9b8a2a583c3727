"""Sweep hint quality for checkpoints produced by ``readfuse train``.

    readfuse datagen --out toy --seed 0
    readfuse train --data toy --out base.ckpt --seed 0 --flag baseline --batch-size 16 --epochs 8
    readfuse train --data toy --out final.ckpt --seed 0 --flag final --batch-size 16 --epochs 8 \\
        --lambda-global 1 --lambda-local 1
    python3 demos/ratio_sweep.py toy base.ckpt final.ckpt

Prints a BLEU table over p-ratio 0.1 .. 0.9 at v-ratio 1.0, then the four
simulated hint sources.  The baseline row is flat since it ignores hints.
"""

import sys
from pathlib import Path

from readfuse import data, evaluation as ev, training

root, *ckpts = sys.argv[1:]
root = Path(root)
models = {}
for path in ckpts:
    ck = training.load_checkpoint(path)
    models[Path(path).stem] = ev.ModelEntry(ck.params, ck.variant)
tv = ck.tgt_vocab
test = data.encode_pairs(data.read_corpus(root / "test.txt"), ck.src_vocab, tv)[:200]
grid = [(1.0, p / 10) for p in range(1, 10, 2)]
lexicon = data.NoisyLexicon.load(root / "lexicon.tsv")
rep = ev.sweep(models, test, tv, grid=grid, scenarios=data.SCENARIOS, lexicon=lexicon, src_vocab=ck.src_vocab)
print(rep.to_text())
