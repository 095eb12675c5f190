import numpy as np
import pytest

from xstnet.cli import CONFIG_DEFAULTS, main, parse_config_file, parse_stages
from xstnet.data import Task
from xstnet.train import average_states, load_checkpoint, split_optimizer

TINY_CFG = """
# smoke-scale corpus and model
corpus.n_triples = 24
corpus.n_ext_pairs = 30
corpus.src_vocab_size = 10
corpus.dev_size = 4
corpus.test_size = 4
corpus.frame_dim = 4
model.d_model = 16
model.n_enc_layers = 1
model.n_dec_layers = 1
model.n_heads = 2
model.d_ffn = 32
model.acoustic.frame_dim = 4
model.acoustic.n_conv_layers = 1
model.acoustic.n_ctx_layers = 0
train.batch_size = 4
train.eval_interval = 5
train.keep_checkpoints = 2
pretrain_steps = 6
finetune_steps = 8
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(out), "--config", cfg_file, "--quiet"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, cfg_file, corpus_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--out", str(out), "--config", cfg_file, "--data", str(corpus_dir), "--quiet"])
    assert rc == 0
    return out


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def test_defaults_cover_documented_namespace():
    assert CONFIG_DEFAULTS["corpus.n_triples"] == "1000"
    assert CONFIG_DEFAULTS["model.d_model"] == "64"
    assert CONFIG_DEFAULTS["train.batch_size"] == "32"
    assert CONFIG_DEFAULTS["recipe"] == "exp1"
    assert "model.vocab_size" not in CONFIG_DEFAULTS  # always derived from data


def test_parse_config_comments_and_blanks(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# heading\n\ncorpus.n_triples = 7  # trailing\n")
    assert parse_config_file(str(p)) == {"corpus.n_triples": "7"}


def test_unknown_config_key_exits_1(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("corpus.n_tripels = 7\n")
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(p)]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_malformed_config_line_exits_1(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("just words\n")
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(p)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "nope.cfg")]) == 1


def test_no_subcommand_exits_1(capsys):
    assert main([]) == 1
    assert "command" in capsys.readouterr().out


def test_bad_flag_exits_1():
    assert main(["gen-data", "--out", "x", "--no-such-flag"]) == 1


def test_bad_recipe_name_exits_1(tmp_path, capsys):
    rc = main(["train", "--out", str(tmp_path), "--recipe", "exp9", "--quiet"])
    assert rc == 1
    assert "unknown recipe" in capsys.readouterr().err


def test_parse_stages_syntax():
    recipe = parse_stages("warm:mt+mt_ext:10; tune:st:5")
    assert recipe.name == "custom"
    assert [s.name for s in recipe.stages] == ["warm", "tune"]
    assert recipe.stages[0].tasks == (Task.MT, Task.MT_EXT)
    assert recipe.stages[1].n_steps == 5


@pytest.mark.parametrize("spec", ["oops", "a:st", "a:st:3:4", "a:xyz:3", "a:st:none"])
def test_parse_stages_rejects_bad_syntax(spec):
    with pytest.raises(ValueError):
        parse_stages(spec)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_artifacts(corpus_dir):
    names = {p.name for p in corpus_dir.iterdir()}
    assert {"train.tsv", "dev.tsv", "test.tsv", "ext.tsv", "vocab.txt", "resolved.cfg"} <= names
    assert "train.frames.bin" in names and "ext.frames.bin" not in names
    resolved = (corpus_dir / "resolved.cfg").read_text()
    assert "corpus.n_triples = 24" in resolved


def test_gen_data_reruns_byte_identical(tmp_path, cfg_file, corpus_dir):
    out = tmp_path / "again"
    assert main(["gen-data", "--out", str(out), "--config", cfg_file, "--quiet"]) == 0
    for name in ("train.tsv", "ext.tsv", "vocab.txt", "train.frames.bin"):
        assert (out / name).read_bytes() == (corpus_dir / name).read_bytes()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_artifacts(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"train_log.csv", "final_scores.csv", "train_curves.png", "resolved.cfg",
            "ckpt-avg.xck", "ckpt-best.xck"} <= names
    log = (run_dir / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,stage,task,loss,dev_metric_name,dev_metric_value"
    assert len(log) == 1 + 6 + 8  # header + one row per step
    scores = (run_dir / "final_scores.csv").read_text().splitlines()
    assert scores[0] == "metric,value"
    assert {r.split(",")[0] for r in scores[1:]} == {"st_bleu", "mt_bleu", "wer"}


def test_train_checkpoint_carries_model_config(run_dir):
    _, meta = load_checkpoint(run_dir / "ckpt-avg.xck")
    assert meta["d_model"] == "16"
    assert meta["stage"] == "averaged"
    assert meta["recipe"] == "exp1"


def test_train_rerun_byte_identical(tmp_path, cfg_file, corpus_dir, run_dir):
    out = tmp_path / "again"
    rc = main(["train", "--out", str(out), "--config", cfg_file, "--data", str(corpus_dir), "--quiet"])
    assert rc == 0
    assert (out / "train_log.csv").read_bytes() == (run_dir / "train_log.csv").read_bytes()
    assert (out / "final_scores.csv").read_bytes() == (run_dir / "final_scores.csv").read_bytes()


def test_train_inline_stages(tmp_path, cfg_file, corpus_dir):
    out = tmp_path / "custom"
    rc = main(["train", "--out", str(out), "--config", cfg_file, "--data", str(corpus_dir),
               "--stage", "warm:mt:3", "--stage", "tune:st:2", "--quiet"])
    assert rc == 0
    rows = (out / "train_log.csv").read_text().splitlines()[1:]
    assert len(rows) == 5
    assert {r.split(",")[1] for r in rows} == {"warm", "tune"}


def test_train_generates_corpus_without_data_flag(tmp_path, cfg_file):
    out = tmp_path / "nodata"
    rc = main(["train", "--out", str(out), "--config", cfg_file, "--quiet"])
    assert rc == 0
    assert (out / "train_log.csv").exists()


# ---------------------------------------------------------------------------
# decode / score
# ---------------------------------------------------------------------------


def test_decode_then_score(tmp_path, cfg_file, corpus_dir, run_dir):
    hyp = tmp_path / "hyp.txt"
    rc = main(["decode", "--ckpt", str(run_dir / "ckpt-avg.xck"), "--data", str(corpus_dir),
               "--task", "st", "--split", "test", "--beam", "2", "--out", str(hyp), "--quiet"])
    assert rc == 0
    lines = hyp.read_text().splitlines()
    assert len(lines) == 4  # one per test example
    report = tmp_path / "score.csv"
    rc = main(["score", "--hyp", str(hyp), "--data", str(corpus_dir), "--task", "st",
               "--split", "test", "--out", str(report), "--quiet"])
    assert rc == 0
    top = report.read_text().splitlines()
    assert top[0] == "metric,value,detail"
    assert top[1].startswith("bleu,")


def test_score_asr_uses_wer(tmp_path, corpus_dir):
    hyp = tmp_path / "hyp.txt"
    transcripts = [line.split("\t")[5] for line in (corpus_dir / "test.tsv").read_text().splitlines()[1:]]
    hyp.write_text("".join(t + "\n" for t in transcripts))
    report = tmp_path / "wer.csv"
    rc = main(["score", "--hyp", str(hyp), "--data", str(corpus_dir), "--task", "asr",
               "--split", "test", "--out", str(report), "--quiet"])
    assert rc == 0
    assert report.read_text().splitlines()[1] == "wer,0.0000,corpus score over 4 sentences"


def test_decode_vocab_mismatch_exits_2(tmp_path, cfg_file, run_dir, capsys):
    other = tmp_path / "other"
    assert main(["gen-data", "--out", str(other), "--config", cfg_file, "--seed", "9", "--quiet"]) == 0
    vocab_lines = (other / "vocab.txt").read_text().splitlines()
    (other / "vocab.txt").write_text("".join(l + "\n" for l in vocab_lines + [f"zzz-extra\t{len(vocab_lines)}"]))
    rc = main(["decode", "--ckpt", str(run_dir / "ckpt-avg.xck"), "--data", str(other),
               "--task", "st", "--split", "test", "--out", str(tmp_path / "h.txt"), "--quiet"])
    assert rc == 2
    assert "does not match" in capsys.readouterr().err


def test_decode_bad_checkpoint_exits_2(tmp_path, corpus_dir):
    bad = tmp_path / "bad.xck"
    bad.write_bytes(b"NOTACKPT")
    rc = main(["decode", "--ckpt", str(bad), "--data", str(corpus_dir),
               "--task", "st", "--split", "test", "--out", str(tmp_path / "h.txt"), "--quiet"])
    assert rc == 2


# ---------------------------------------------------------------------------
# average
# ---------------------------------------------------------------------------


def test_average_command_matches_library(tmp_path, run_dir):
    ckpts = sorted(str(p) for p in run_dir.glob("ckpt-0*.xck"))
    assert len(ckpts) == 2  # train.keep_checkpoints
    out = tmp_path / "avg.xck"
    assert main(["average", *ckpts, "--out", str(out)]) == 0
    state, meta = load_checkpoint(out)
    model_state, _ = split_optimizer(state, meta)
    states = []
    for p in ckpts:
        s, m = load_checkpoint(p)
        states.append(split_optimizer(s, m)[0])
    expected = average_states(states)
    assert set(model_state) == set(expected)
    for name in expected:
        assert np.array_equal(model_state[name], expected[name])
    assert meta["stage"] == "averaged"
    assert meta["averaged_over"] == "2"


# ---------------------------------------------------------------------------
# ablate / sweep-ext
# ---------------------------------------------------------------------------


def test_ablate_table_and_convergence(tmp_path, cfg_file, corpus_dir):
    out = tmp_path / "abl"
    rc = main(["ablate", "--out", str(out), "--config", cfg_file, "--data", str(corpus_dir),
               "--seeds", "0", "--pretrain-steps", "4", "--finetune-steps", "4",
               "--convergence-report", "--quiet"])
    assert rc == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "recipe,seed,st_bleu,mt_bleu,wer"
    assert len(rows) == 1 + 8 * 2  # per-seed row + mean row for each recipe
    assert sum(1 for r in rows[1:] if r.split(",")[1] == "mean") == 8
    assert (out / "ablation.png").exists()
    conv = (out / "convergence.csv").read_text().splitlines()
    assert conv[0] == "recipe,seed,step,stage,dev_metric_name,dev_metric_value"
    assert {r.split(",")[0] for r in conv[1:]} == {"exp1", "exp3"}
    assert (out / "convergence.png").exists()


def test_sweep_ext_table(tmp_path, cfg_file):
    out = tmp_path / "sw"
    rc = main(["sweep-ext", "--out", str(out), "--config", cfg_file, "--sizes", "0,30",
               "--pretrain-steps", "4", "--finetune-steps", "4", "--quiet"])
    assert rc == 0
    rows = (out / "sweep_ext.csv").read_text().splitlines()
    assert rows[0] == "ext_size,mt_bleu,st_bleu"
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "30"]
    assert (out / "sweep_ext.png").exists()


def test_sweep_ext_empty_sizes_exits_1(tmp_path, capsys):
    assert main(["sweep-ext", "--out", str(tmp_path / "sw"), "--sizes", ","]) == 1
    assert "sizes" in capsys.readouterr().err
