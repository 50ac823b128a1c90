import os
import subprocess
import sys

import pytest

from rin.cli import build_parser, main
from rin.imageio import read_ppm


@pytest.fixture
def trained(tmp_path, config_text):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(config_text(**{"train.total_updates": "4"}))
    assert main(["train", str(cfg)]) == 0
    return cfg, tmp_path / "run" / "ckpt-00000004.rin"


class TestCommands:
    def test_parser_lists_subcommands(self):
        help_text = build_parser().format_help()
        for name in ("train", "sample", "gradcheck", "flops", "attn", "eval-oracle"):
            assert name in help_text

    def test_flops_preset(self, capsys, tmp_path):
        assert main(["flops", "in64", "--csv", str(tmp_path / "c.csv")]) == 0
        out = capsys.readouterr().out
        assert "GFLOPs" in out and "params" in out
        assert (tmp_path / "c.csv").read_text().startswith("component,")

    def test_sample_twice_identical(self, trained, tmp_path):
        _, ckpt = trained
        for name in ("a", "b"):
            assert main(["sample", str(ckpt), "--steps", "3", "--count", "2", "--seed", "5",
                         "--out", str(tmp_path / name)]) == 0
        for i in range(2):
            a = (tmp_path / "a" / f"sample-{i:04d}.ppm").read_bytes()
            assert a == (tmp_path / "b" / f"sample-{i:04d}.ppm").read_bytes()
        assert read_ppm(tmp_path / "a" / "sample-0000.ppm").shape == (8, 8, 3)

    def test_sample_trace_and_ddpm(self, trained, tmp_path):
        _, ckpt = trained
        assert main(["sample", str(ckpt), "--steps", "2", "--count", "1", "--rule", "ddpm",
                     "--trace", "--out", str(tmp_path / "s")]) == 0
        assert (tmp_path / "s" / "latents.rin").exists()

    def test_attn(self, trained, tmp_path, capsys):
        _, ckpt = trained
        assert main(["attn", str(ckpt), "--steps", "2", "--out", str(tmp_path / "a")]) == 0
        files = os.listdir(tmp_path / "a")
        assert {"entropy.csv", "read.rin", "read-step0001-block01.ppm"} <= set(files)

    def test_eval_oracle(self, trained, capsys):
        cfg, ckpt = trained
        assert main(["eval-oracle", str(cfg), "--checkpoint", str(ckpt), "--trials", "32"]) == 0
        assert "analytic optimum" in capsys.readouterr().out

    def test_gradcheck(self, trained, capsys):
        cfg, _ = trained
        assert main(["gradcheck", str(cfg), "--params", "5"]) == 0
        assert capsys.readouterr().out.strip().endswith("PASS")

    def test_resume_flag(self, trained, capsys):
        cfg, _ = trained
        assert main(["train", str(cfg), "--resume"]) == 0
        assert "step 4" in capsys.readouterr().out

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.rin"
        bad.write_bytes(b"garbage")
        assert main(["sample", str(bad)]) == 2
        assert "bad magic" in capsys.readouterr().err

    def test_module_entry_with_thread_pin(self):
        env = dict(os.environ, RIN_THREADS="1")
        proc = subprocess.run([sys.executable, "-m", "rin", "flops", "in256"], capture_output=True,
                              text=True, env=env, check=True)
        assert "GFLOPs" in proc.stdout
