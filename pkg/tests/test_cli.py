"""Command-line surface: flags, config precedence, outputs, exit codes."""

import numpy as np
import pytest

from regionmim.cli import (CONFIG_KEYS, build_parser, default_config, main,
                           parse_config_file, resolve_config)
from regionmim.data import read_pgm

TINY_MODEL = """
# desk-scale model for tests
image_size = 16
patch_size = 4
blocks = 1
latent_dim = 8
heads = 2
mlp_dim = 16
dec_blocks = 1
dec_latent_dim = 8
dec_heads = 2
dec_mlp_dim = 16
batch_size = 8
base_lr = 0.016
pretrain_epochs = 2
finetune_epochs = 2
per_class = 3
"""


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-corpus")
    config = root / "tiny.cfg"
    config.write_text(TINY_MODEL)
    code = main(["gen-data", "--config", str(config), "--out", str(root / "data"),
                 "--seed", "3"])
    assert code == 0
    return root


class TestHelpAndUsage:
    @pytest.mark.parametrize("command", ["gen-data", "pretrain", "finetune",
                                         "eval", "mask-viz", "sweep", "grad-check"])
    def test_subcommand_help_exits_zero(self, command, capsys):
        assert main([command, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--config" in out and "--seed" in out

    def test_top_level_help(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        for command in ("gen-data", "pretrain", "finetune", "eval",
                        "mask-viz", "sweep", "grad-check"):
            assert command in out

    def test_unknown_command_exits_one(self):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_exits_one(self, capsys):
        assert main(["pretrain"]) == 1
        assert "--manifest" in capsys.readouterr().err


class TestConfigResolution:
    def test_defaults_match_published_hyperparameters(self):
        config = default_config()
        assert config["pretrain_epochs"] == 40
        assert config["finetune_epochs"] == 30
        assert config["batch_size"] == 256
        assert config["base_lr"] == 1.5e-4
        assert config["weight_decay"] == 0.05
        assert config["beta1"] == 0.9
        assert config["beta2"] == 0.95
        assert config["patch_size"] == 16
        assert config["mask_ratio"] == 0.75

    def test_unknown_key_is_fatal_and_named(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("masking_ration = 0.75\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
        assert "masking_ration" in capsys.readouterr().err

    def test_flags_override_file_overrides_defaults(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("mask_ratio = 0.5\nseed = 9\n")
        parser = build_parser()
        args = parser.parse_args(["pretrain", "--config", str(cfg),
                                  "--mask-ratio", "0.25"])
        resolved = resolve_config(args, phase_epochs="pretrain_epochs")
        assert resolved["mask_ratio"] == 0.25  # flag wins
        assert resolved["seed"] == 9           # file beats default
        assert resolved["batch_size"] == 256   # default

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\n\nseed = 5  # trailing\n")
        assert parse_config_file(cfg) == {"seed": 5}

    def test_indivisible_geometry_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("image_size = 30\npatch_size = 16\n")
        parser = build_parser()
        args = parser.parse_args(["gen-data", "--config", str(cfg)])
        from regionmim.errors import ConfigError
        with pytest.raises(ConfigError, match="does not divide"):
            resolve_config(args)

    def test_every_key_has_a_parser_and_default(self):
        for key, (parser, default) in CONFIG_KEYS.items():
            assert callable(parser), key
            assert default is not None or key == "manifest", key


class TestGenData:
    def test_outputs_and_resolved_config(self, corpus_dir):
        data = corpus_dir / "data"
        assert (data / "manifest.csv").is_file()
        assert (data / "resolved-config.txt").is_file()
        text = (data / "resolved-config.txt").read_text()
        assert "command = gen-data" in text
        assert "seed = 3" in text
        assert len(list((data / "images").glob("*.pgm"))) == 12

    def test_deterministic_across_runs(self, corpus_dir, tmp_path):
        config = corpus_dir / "tiny.cfg"
        assert main(["gen-data", "--config", str(config), "--out",
                     str(tmp_path / "again"), "--seed", "3"]) == 0
        first = sorted((corpus_dir / "data").rglob("*.pgm"))
        second = sorted((tmp_path / "again").rglob("*.pgm"))
        assert [p.name for p in first] == [p.name for p in second]
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes(), a.name


class TestPipeline:
    def test_pretrain_finetune_eval(self, corpus_dir, capsys):
        config = corpus_dir / "tiny.cfg"
        manifest = corpus_dir / "data" / "manifest.csv"
        pre_dir = corpus_dir / "pre"
        assert main(["pretrain", "--config", str(config), "--manifest", str(manifest),
                     "--out", str(pre_dir), "--seed", "1",
                     "--mask-ratio", "0.5"]) == 0
        assert (pre_dir / "checkpoint.rgmm").is_file()
        metrics = (pre_dir / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "epoch,split,loss,accuracy,seconds,clamped_plans"
        assert len(metrics) == 3  # header + 2 epochs

        ft_dir = corpus_dir / "ft"
        assert main(["finetune", "--config", str(config), "--manifest", str(manifest),
                     "--checkpoint", str(pre_dir / "checkpoint.rgmm"),
                     "--out", str(ft_dir), "--seed", "1"]) == 0
        assert (ft_dir / "checkpoint.rgmm").is_file()

        ev_dir = corpus_dir / "ev"
        capsys.readouterr()
        assert main(["eval", "--config", str(config), "--manifest", str(manifest),
                     "--checkpoint", str(ft_dir / "checkpoint.rgmm"),
                     "--out", str(ev_dir)]) == 0
        out = capsys.readouterr().out
        assert "accuracy =" in out
        assert (ev_dir / "confusion.csv").is_file()
        rows = (ev_dir / "confusion.csv").read_text().splitlines()
        assert len(rows) == 4

    def test_eval_pretrain_checkpoint_rejected(self, corpus_dir, capsys):
        config = corpus_dir / "tiny.cfg"
        manifest = corpus_dir / "data" / "manifest.csv"
        assert main(["eval", "--config", str(config), "--manifest", str(manifest),
                     "--checkpoint", str(corpus_dir / "pre" / "checkpoint.rgmm"),
                     "--out", str(corpus_dir / "ev2")]) == 1
        assert "classifier head" in capsys.readouterr().err

    def test_missing_checkpoint_is_runtime_error(self, corpus_dir):
        config = corpus_dir / "tiny.cfg"
        manifest = corpus_dir / "data" / "manifest.csv"
        assert main(["eval", "--config", str(config), "--manifest", str(manifest),
                     "--checkpoint", str(corpus_dir / "nope.rgmm"),
                     "--out", str(corpus_dir / "ev3")]) == 2


class TestMaskViz:
    def test_renders_three_pgm_files(self, corpus_dir):
        config = corpus_dir / "tiny.cfg"
        manifest = corpus_dir / "data" / "manifest.csv"
        out = corpus_dir / "viz"
        assert main(["mask-viz", "--config", str(config), "--manifest", str(manifest),
                     "--out", str(out), "--seed", "2", "--mask-ratio", "0.5"]) == 0
        for name in ("original.pgm", "overlay.pgm", "masked.pgm"):
            assert (out / name).is_file(), name
        masked = read_pgm(out / "masked.pgm")
        assert (masked == 128).any()  # gray fill on masked patches

    def test_bad_sample_index(self, corpus_dir):
        config = corpus_dir / "tiny.cfg"
        manifest = corpus_dir / "data" / "manifest.csv"
        assert main(["mask-viz", "--config", str(config), "--manifest", str(manifest),
                     "--out", str(corpus_dir / "viz2"), "--sample-index", "99"]) == 1
