"""Command-line behavior: exit codes, output formats, file handling.

Everything calls main(argv) in-process; a tiny model is trained once on
the bundled synthetic data and shared by the eval/predict tests."""

import io
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pytest

import ntrr.data as D
import ntrr.training as TR
from ntrr.cli import main

REPO = Path(__file__).resolve().parents[1]
DATA = REPO / "data"
CFG = str(REPO / "configs" / "synthetic.cfg")


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    try:
        with redirect_stdout(out), redirect_stderr(err):
            code = main(argv)
    except SystemExit as exc:
        code = exc.code
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("run")
    code, out, err = run(["train", "--train", str(DATA / "train.bmes"),
                          "--dev", str(DATA / "dev.bmes"),
                          "--out", str(out_dir), "--config", CFG])
    assert code == 0, err
    return out_dir, out


# ----------------------------------------------------------------- convert


def test_convert_bio_to_bmes(tmp_path):
    src = tmp_path / "in.bio"
    src.write_text("中 B-LOC\n国 I-LOC\n人 O\n\n山 B-PER\n")
    dst = tmp_path / "out.bmes"
    code, out, err = run(["convert", str(src), str(dst), "--from", "bio"])
    assert code == 0
    assert "wrote 2 sentences" in out and "0 repairs" in out
    assert dst.read_text() == "中 B-LOC\n国 E-LOC\n人 O\n\n山 S-PER\n\n"


def test_convert_bmes_is_idempotent(tmp_path):
    a = tmp_path / "a.bmes"
    b = tmp_path / "b.bmes"
    assert run(["convert", str(DATA / "dev.bmes"), str(a), "--from", "bmes"])[0] == 0
    assert run(["convert", str(a), str(b), "--from", "bmes"])[0] == 0
    assert a.read_bytes() == b.read_bytes() == (DATA / "dev.bmes").read_bytes()


def test_convert_reports_repairs_and_warnings(tmp_path):
    src = tmp_path / "in.bio"
    src.write_text("a I-PER\njunk line here\nb O\n")
    dst = tmp_path / "out.bmes"
    code, out, err = run(["convert", str(src), str(dst), "--from", "bio"])
    assert code == 0
    assert "1 repairs" in out
    assert "warning" in err and "line 2" in err


# -------------------------------------------------------------- exit codes


def test_parse_error_names_line_17(tmp_path):
    lines = [f"{'ab'[i % 2]} O" for i in range(16)] + ["x Q-FOO"]
    bad = tmp_path / "bad.bmes"
    bad.write_text("\n".join(lines) + "\n")
    code, out, err = run(["train", "--train", str(bad),
                          "--dev", str(DATA / "dev.bmes"),
                          "--out", str(tmp_path / "o")])
    assert code == 2
    assert "line 17" in err


def test_usage_error_is_exit_2():
    code, out, err = run(["convert", "only-one-arg"])
    assert code == 2
    code, out, err = run(["no-such-command"])
    assert code == 2


def test_bad_config_value_is_exit_2(tmp_path):
    code, out, err = run(["train", "--train", str(DATA / "train.bmes"),
                          "--dev", str(DATA / "dev.bmes"),
                          "--out", str(tmp_path / "o"), "--set", "lr_init=banana"])
    assert code == 2
    assert "lr_init" in err


def test_unplanned_failure_is_exit_1(tmp_path):
    code, out, err = run(["convert", str(DATA / "dev.bmes"), str(tmp_path),
                          "--from", "bmes"])
    assert code == 1
    assert "internal error" in err


def test_gradcheck_rejects_unknown_scale():
    code, out, err = run(["gradcheck", "--scale", "huge"])
    assert code == 2
    assert "scale" in err


# ------------------------------------------------------- train, eval, predict


def test_train_outputs(trained):
    out_dir, out = trained
    assert "best dev F1" in out
    assert (out_dir / "model.ckpt").exists()
    assert (out_dir / "vocab.txt").exists()
    log = (out_dir / "train.log").read_text().splitlines()
    assert any(l.startswith("epoch\t") for l in log)
    step_line = next(l for l in log if not l.startswith("epoch"))
    assert len(step_line.split("\t")) == 5


def test_eval_model_prints_table(trained):
    out_dir, _ = trained
    code, out, err = run(["eval", "--ckpt", str(out_dir / "model.ckpt"),
                          "--data", str(DATA / "test.bmes")])
    assert code == 0, err
    lines = out.splitlines()
    assert lines[0] == "Precise (%)\tRecall (%)\tF1 Score (%)"
    overall = lines[1].split("\t")
    assert len(overall) == 3 and all("." in v for v in overall)
    assert lines[-1].startswith("repairs\t")


def test_eval_gold_as_predictions_is_perfect(tmp_path):
    code, out, err = run(["eval", "--pred", str(DATA / "test.bmes"),
                          "--data", str(DATA / "test.bmes")])
    assert code == 0, err
    assert out.splitlines()[1] == "100.00\t100.00\t100.00"


def test_eval_wants_exactly_one_source(trained):
    out_dir, _ = trained
    both = ["eval", "--ckpt", str(out_dir / "model.ckpt"),
            "--pred", str(DATA / "test.bmes"), "--data", str(DATA / "test.bmes")]
    assert run(both)[0] == 2
    assert run(["eval", "--data", str(DATA / "test.bmes")])[0] == 2


def test_eval_missing_vocab_is_exit_2(trained, tmp_path):
    out_dir, _ = trained
    lone = tmp_path / "model.ckpt"
    lone.write_bytes((out_dir / "model.ckpt").read_bytes())
    code, out, err = run(["eval", "--ckpt", str(lone),
                          "--data", str(DATA / "test.bmes")])
    assert code == 2
    assert "vocab" in err


def test_predict_then_eval_matches_in_process_scores(trained, tmp_path):
    out_dir, _ = trained
    corpus = D.read_conll(str(DATA / "test.bmes"))
    plain = tmp_path / "plain.txt"
    plain.write_text("\n".join("".join(toks) for toks, _ in corpus.sentences) + "\n")
    pred = tmp_path / "pred.bmes"
    code, out, err = run(["predict", "--ckpt", str(out_dir / "model.ckpt"),
                          "--in", str(plain), "--out", str(pred)])
    assert code == 0, err
    assert f"wrote {len(corpus.sentences)} sentences" in out

    code, out, err = run(["eval", "--pred", str(pred),
                          "--data", str(DATA / "test.bmes")])
    assert code == 0, err
    got = [float(v) for v in out.splitlines()[1].split("\t")]

    ckpt = D.load_checkpoint(str(out_dir / "model.ckpt"))
    vocab = D.load_vocab(str(out_dir / "vocab.txt"))
    res = TR.evaluate(corpus, vocab, D.params_from_checkpoint(ckpt),
                      ckpt.model_config)
    want = [res.precision * 100, res.recall * 100, res.f1 * 100]
    assert all(abs(g - w) <= 0.005 for g, w in zip(got, want))


def test_predict_empty_input_is_exit_2(trained, tmp_path):
    out_dir, _ = trained
    empty = tmp_path / "empty.txt"
    empty.write_text("\n  \n")
    code, out, err = run(["predict", "--ckpt", str(out_dir / "model.ckpt"),
                          "--in", str(empty), "--out", str(tmp_path / "p.bmes")])
    assert code == 2
    assert "no sentences" in err


# ---------------------------------------------------------------- pretrain


def test_pretrain_then_warm_start(tmp_path):
    pre_dir = tmp_path / "pre"
    code, out, err = run(["pretrain", "--train", str(DATA / "train.bmes"),
                          "--out", str(pre_dir), "--config", CFG,
                          "--set", "epochs=1"])
    assert code == 0, err
    assert "pretraining finished" in out
    assert (pre_dir / "pretrain.ckpt").exists()
    assert (pre_dir / "vocab.txt").exists()

    ft_dir = tmp_path / "ft"
    code, out, err = run(["train", "--train", str(DATA / "train.bmes"),
                          "--dev", str(DATA / "dev.bmes"),
                          "--out", str(ft_dir), "--config", CFG,
                          "--set", "epochs=3", "--set", "stop_at_f1=0",
                          "--init", str(pre_dir / "pretrain.ckpt")])
    assert code == 0, err
    assert "best dev F1" in out


# ------------------------------------------------------------------ report


def test_report_summarizes_log(trained):
    out_dir, _ = trained
    code, out, err = run(["report", str(out_dir / "train.log")])
    assert code == 0, err
    lines = out.splitlines()
    assert lines[0] == "epoch\tsteps\tmean_ce\tmean_kl\tmean_total\tP\tR\tF1"
    assert len(lines[1].split("\t")) == 8
    assert "loss curve" in out
    assert "min " in out and "steps " in out


def test_report_rejects_junk(tmp_path):
    bad = tmp_path / "junk.log"
    bad.write_text("this is not a log\n")
    code, out, err = run(["report", str(bad)])
    assert code == 2
    assert "line 1" in err
