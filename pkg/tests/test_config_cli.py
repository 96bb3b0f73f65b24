import json

import pytest

from cmlm_distill.cli import evaluation_report, main
from cmlm_distill.config import Settings, load_settings, parse_override, valid_keys
from cmlm_distill.errors import ConfigError

TINY = ["--corpus.kind=reversal", "--corpus.pairs=120", "--corpus.words=8", "--corpus.max_len=6",
        "--corpus.dev_size=10", "--corpus.test_size=10",
        "--model.layers=1", "--model.d_model=16", "--model.heads=2", "--model.d_ff=32",
        "--teacher_model.layers=1", "--teacher_model.d_model=16", "--teacher_model.heads=2",
        "--teacher_model.d_ff=32",
        "--teacher.total_steps=6", "--teacher.eval_every=3", "--teacher.warmup_steps=2",
        "--train.total_steps=6", "--train.eval_every=3", "--train.warmup_steps=2"]


class TestSettings:
    def test_defaults(self):
        s = load_settings()
        assert s.train.k == 8 and s.experiment.seeds == (0, 1, 2)

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nalpha = 0.25\nk = 4\n[experiment]\nseeds = 5, 6\n")
        s = load_settings(path, ["--train.k=6"])
        assert (s.train.alpha, s.train.k, s.experiment.seeds) == (0.25, 6, (5, 6))

    def test_ini_round_trip(self, tmp_path):
        s = load_settings(None, ["--train.alpha=0.3", "--model.positional=learned"])
        (tmp_path / "c.ini").write_text(s.to_ini())
        assert load_settings(tmp_path / "c.ini") == s

    def test_unknown_key_lists_valid_keys(self):
        with pytest.raises(ConfigError) as err:
            load_settings(None, ["--train.alpah=0.5"])
        for key in valid_keys("train"):
            assert key in str(err.value)

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="valid sections"):
            load_settings(None, ["--trian.alpha=0.5"])

    @pytest.mark.parametrize("arg", ["--train.k=four", "--model.layers=1.5", "--train.alpha=x"])
    def test_bad_values(self, arg):
        with pytest.raises(ConfigError):
            load_settings(None, [arg])

    def test_override_syntax(self):
        assert parse_override("--a.b=c=d") == ("a", "b", "c=d")
        with pytest.raises(ConfigError):
            parse_override("--ab=c")

    def test_with_seed(self):
        s = load_settings().with_seed(9)
        assert isinstance(s, Settings) and s.train.seed == 9 and s.teacher.seed == 9


class TestCommands:
    def test_help_and_usage_errors(self, capsys):
        assert main(["--help"]) == 0
        assert main([]) == 2
        assert main(["evaluate"]) == 2

    def test_bad_override_exits_2(self, tmp_path, capsys):
        assert main(["make-corpus", "--out-dir", str(tmp_path), "--train.nope=1"]) == 2
        assert "valid keys" in capsys.readouterr().err
        assert main(["make-corpus", "--out-dir", str(tmp_path), "stray"]) == 2

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["evaluate", "--hyp", str(tmp_path / "x"), "--ref", str(tmp_path / "y")]) == 2

    def test_evaluate(self, tmp_path, capsys):
        (tmp_path / "hyp").write_text("a b c d\na b\n")
        (tmp_path / "ref").write_text("a b c d\na b\n")
        assert main(["evaluate", "--hyp", str(tmp_path / "hyp"), "--ref", str(tmp_path / "ref"),
                     "--bucket-width", "2"]) == 0
        out = capsys.readouterr().out.splitlines()
        report = json.loads(out[0])
        assert report["bleu"] == pytest.approx(100.0) and report["rougeL"] == pytest.approx(100.0)
        assert [(b["lo"], b["hi"], b["count"]) for b in report["buckets"]] == [(1, 2, 1), (3, 4, 1)]
        assert "ref length" in out[1] and len(out) == 4

    def test_evaluate_misaligned_exits_1(self, tmp_path):
        (tmp_path / "hyp").write_text("a\n")
        (tmp_path / "ref").write_text("a\nb\n")
        assert main(["evaluate", "--hyp", str(tmp_path / "hyp"), "--ref", str(tmp_path / "ref")]) == 1

    def test_report_bucket_counts(self):
        refs = [["x"] * n for n in (1, 5, 11, 12)]
        report = evaluation_report(refs, refs, bucket_width=10)
        assert sum(b["count"] for b in report["buckets"]) == report["sentences"] == 4

    def test_grad_check_ops(self, capsys):
        assert main(["grad-check", "--ops-only"]) == 0
        assert "matmul" in capsys.readouterr().out


def test_pipeline(tmp_path, capsys):
    data, out = tmp_path / "data", tmp_path / "out"
    assert main(["make-corpus", "--out-dir", str(data), *TINY]) == 0
    assert (data / "train.src").exists() and (data / "test.tgt").exists()
    assert main(["finetune-teacher", "--data", str(data), "--out-dir", str(out), *TINY]) == 0
    vocab = out / "vocab.txt"
    assert main(["precompute-logits", "--data", str(data), "--vocab", str(vocab), "--teacher",
                 str(out / "teacher.ckpt"), "--out-dir", str(out), *TINY]) == 0
    assert main(["train-student", "--data", str(data), "--vocab", str(vocab), "--store",
                 str(out / "soft_labels.bin"), "--out-dir", str(out), *TINY]) == 0
    hyp = tmp_path / "hyp.txt"
    assert main(["translate", "--checkpoint", str(out / "student.ckpt"), "--vocab", str(vocab), "--input",
                 str(data / "test.src"), "--output", str(hyp), "--beam", "2", *TINY]) == 0
    assert len(hyp.read_text().splitlines()) == 10
    capsys.readouterr()

    # a student cannot be trained with soft-label weight and no store
    assert main(["train-student", "--data", str(data), "--vocab", str(vocab), "--out-dir", str(out),
                 "--train.alpha=0.5", *TINY]) != 0
    # the teacher checkpoint is not a student
    assert main(["translate", "--checkpoint", str(out / "teacher.ckpt"), "--vocab", str(vocab), "--input",
                 str(data / "test.src"), "--output", str(hyp), *TINY]) == 2
    # a different vocabulary is refused
    other = tmp_path / "other.txt"
    other.write_text(vocab.read_text() + "zzz\n")
    assert main(["translate", "--checkpoint", str(out / "student.ckpt"), "--vocab", str(other), "--input",
                 str(data / "test.src"), "--output", str(hyp), *TINY]) == 2
    assert "different vocabulary" in capsys.readouterr().err


def test_ablate_writes_a_table(tmp_path, capsys):
    from cmlm_distill.recipes import ExperimentRecipe

    assert main(["ablate", "--variants", "full,small", "--out-dir", str(tmp_path), "--experiment.seeds=0,1",
                 *TINY]) == 0
    table = (tmp_path / "ablation.txt").read_text().splitlines()
    assert "seed 0" in table[0] and "seed 1" in table[0]
    assert [line.split()[0] for line in table[2:]] == ["baseline", "distilled_full", "distilled_small"]
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert set(report["mean_test_bleu"]) == {"baseline", "distilled_full", "distilled_small"}
    assert main(["ablate", "--variants", "huge", *TINY]) == 2

    recipe = ExperimentRecipe.from_settings(load_settings(None, ["--experiment.baseline_scale=0.5"]))
    assert recipe.baseline.alpha == 0.0
    assert recipe.baseline.total_steps == recipe.distilled.total_steps // 2
    assert recipe.baseline.warmup_steps == recipe.distilled.warmup_steps // 2
    with pytest.raises(ConfigError):
        load_settings(None, ["--experiment.baseline_scale=0"])
