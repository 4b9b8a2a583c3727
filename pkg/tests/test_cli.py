import io
import json

import pytest

from readfuse import cli


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["datagen", "--out", str(root / "d"), "--seed", "3", "--size", "120", "--test-size", "12",
                     "--min-len", "3", "--max-len", "6"]) == 0
    assert cli.main(["train", "--data", str(root / "d"), "--out", str(root / "m.ckpt"), "--seed", "7",
                     "--epochs", "1", "--emb", "8", "--hidden", "8", "--attn", "8"]) == 0
    return root


def test_datagen_files(workspace):
    names = {p.name for p in (workspace / "d").iterdir()}
    assert {"train.txt", "test.txt", "train.ext.jsonl", "test.ext.jsonl", "src.vocab", "tgt.vocab",
            "lexicon.tsv", "manifest.json"} <= names
    assert len((workspace / "d" / "test.txt").read_text().splitlines()) == 12


def test_train_is_reproducible(workspace):
    out = workspace / "again.ckpt"
    assert cli.main(["train", "--data", str(workspace / "d"), "--out", str(out), "--seed", "7",
                     "--epochs", "1", "--emb", "8", "--hidden", "8", "--attn", "8"]) == 0
    assert out.read_bytes() == (workspace / "m.ckpt").read_bytes()
    trace = (workspace / "m.ckpt.trace.jsonl").read_text().splitlines()
    assert json.loads(trace[0])["epoch"] == 1


def test_seed_is_mandatory(workspace):
    with pytest.raises(SystemExit):
        cli.main(["train", "--data", str(workspace / "d"), "--out", str(workspace / "x.ckpt")])


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit):
        cli.main(["gradcheck", "--bogus"])


def test_config_echo(workspace, capsys):
    cli.main(["gradcheck", "--flag", "basic", "--samples", "5"])
    err = capsys.readouterr().err
    line = next(l for l in err.splitlines() if l.startswith("config "))
    assert json.loads(line[len("config "):])["flag"] == "basic"


def test_config_file_and_flag_precedence(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"flag": "basic", "samples": 5, "seed": 2}))
    assert cli.main(["gradcheck", "--config", str(cfg), "--seed", "4"]) == 0
    err = capsys.readouterr().err
    resolved = json.loads(next(l for l in err.splitlines() if l.startswith("config "))[7:])
    assert resolved["flag"] == "basic" and resolved["samples"] == 5 and resolved["seed"] == 4


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        cli.main(["gradcheck", "--config", str(cfg)])


def test_gradcheck_reports_small_error(capsys):
    assert cli.main(["gradcheck", "--flag", "final", "--samples", "40"]) == 0
    out = capsys.readouterr().out
    err = float(out.split()[-1])
    assert err < 1e-3


def _inputs(workspace, n=4):
    lines = (workspace / "d" / "test.txt").read_text().splitlines()[:n]
    src = workspace / "in.txt"
    src.write_text("".join(l.split("|||")[0].strip() + "\n" for l in lines))
    ext = workspace / "in.ext.jsonl"
    ext.write_text("".join((workspace / "d" / "test.ext.jsonl").read_text().splitlines(True)[:n]))
    return src, ext


def test_translate_without_external_words_is_baseline_decoding(workspace, capsys):
    src, ext = _inputs(workspace)
    out_plain = workspace / "plain.txt"
    assert cli.main(["translate", "--checkpoint", str(workspace / "m.ckpt"), "--input", str(src),
                     "--output", str(out_plain)]) == 0
    from readfuse import evaluation, training
    ck = training.load_checkpoint(workspace / "m.ckpt")
    srcs = [ck.src_vocab.encode(l.split()) for l in src.read_text().splitlines()]
    closed = evaluation.translate(ck.params, ck.variant, ck.tgt_vocab, srcs, None)
    assert out_plain.read_text().splitlines() == [" ".join(ck.tgt_vocab.decode(r.tokens)) for r in closed]


def test_translate_with_trace(workspace, capsys):
    src, ext = _inputs(workspace)
    assert cli.main(["translate", "--checkpoint", str(workspace / "m.ckpt"), "--input", str(src),
                     "--external", str(ext), "--trace"]) == 0
    cap = capsys.readouterr()
    assert len(cap.out.splitlines()) == 4
    assert "D:" in cap.err and "beta:" in cap.err


def test_translate_missing_checkpoint(workspace, capsys):
    src, _ = _inputs(workspace)
    assert cli.main(["translate", "--checkpoint", str(workspace / "none.ckpt"), "--input", str(src)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: ") and "none.ckpt" in err[-1]


def test_translate_external_count_mismatch_removes_output(workspace):
    src, ext = _inputs(workspace, 4)
    short = workspace / "short.jsonl"
    short.write_text(ext.read_text().splitlines(True)[0])
    out = workspace / "never.txt"
    assert cli.main(["translate", "--checkpoint", str(workspace / "m.ckpt"), "--input", str(src),
                     "--external", str(short), "--output", str(out)]) == 1
    assert not out.exists()


def test_failed_training_leaves_no_files(workspace):
    out = workspace / "bad.ckpt"
    assert cli.main(["train", "--data", str(workspace / "missing"), "--out", str(out), "--seed", "1"]) == 1
    assert not out.exists() and not (workspace / "bad.ckpt.trace.jsonl").exists()


def test_evaluate(workspace, capsys):
    hyp = workspace / "hyp.txt"
    assert cli.main(["evaluate", "--checkpoint", str(workspace / "m.ckpt"), "--data", str(workspace / "d"),
                     "--hypotheses", str(hyp), "--beam", "2"]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 <= rec["bleu"] <= 100 and {"precision", "recall", "f1"} <= set(rec)
    assert len(hyp.read_text().splitlines()) == 12


def test_sweep_writes_reports(workspace, capsys):
    out = workspace / "sweep.txt"
    assert cli.main(["sweep", "--checkpoint", f"final={workspace / 'm.ckpt'}", "--data", str(workspace / "d"),
                     "--p-ratios", "0.1,0.9", "--beam", "2", "--limit", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3
    assert len((workspace / "sweep.jsonl").read_text().splitlines()) == 2
    assert cli.main(["sweep", "--checkpoint", str(workspace / "m.ckpt"), "--data", str(workspace / "d"),
                     "--mode", "scenario", "--beam", "2", "--limit", "5"]) == 0


def test_sweep_missing_checkpoint(workspace):
    assert cli.main(["sweep", "--checkpoint", str(workspace / "nope.ckpt"), "--data", str(workspace / "d")]) == 1


def test_repl_handles_unknown_words(workspace, capsys, caplog):
    from readfuse import training
    ck = training.load_checkpoint(workspace / "m.ckpt")
    src = " ".join(ck.src_vocab.to_list()[5:8]) + " qqq"
    word = ck.tgt_vocab.to_list()[6]
    stdin = io.StringIO(f"{src}\n{word} nonsense\n\n{src}\n")
    args = cli.parse_args(["repl", "--checkpoint", str(workspace / "m.ckpt")])
    cli.cmd_repl(args, stdin=stdin)
    out = capsys.readouterr().out.splitlines()
    assert sum(1 for l in out if l.startswith("  D:")) == 1
    assert "<unk>" in caplog.text or "mapped to <unk>" in caplog.text
