import subprocess
import sys

import pytest

from sit.cli import CliConfig, UsageError, apply_setting, build_config, main, parse_config_lines
from sit.model import PRESETS

MINI = [
    "-o", "model.image_size=16",
    "-o", "model.embed_dim=32",
    "-o", "model.depth=1",
    "-o", "model.contrastive_dim=8",
    "-o", "batch_size=8",
    "-o", "dataset=synthetic:n=32,classes=2,size=16,seed=0",
]


def test_no_args_is_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_echoes_token(capsys):
    assert main(["frobnicate"]) == 1
    assert "frobnicate" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert main(["pretrain", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_bad_config_key_is_usage(capsys):
    assert main(["pretrain", "-o", "model.nope=3"]) == 1
    assert "nope" in capsys.readouterr().err


def test_config_grammar(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text(
        "# comment line\n"
        "model = tiny-stl\n"
        "model.depth = 2   # trailing comment\n"
        "tasks.rotation = false\n"
        "weighting = fixed\n"
        "alphas = 1, 0.5, 0.25\n"
        "optim.lr = 2e-4\n"
        "corruption.drop_fraction = 0.2, 0.4\n"
        "max_steps = 7\n"
        "finetune.steps = 11\n"
        "finetune.optim.lr = 1e-4\n"
        "probe.steps = 13\n"
    )
    cfg = build_config(str(f), ["optim.lr=3e-4", "seed=9"])
    r = cfg.run
    assert r.model.image_size == PRESETS["tiny-stl"].image_size and r.model.depth == 2
    assert r.tasks.rotation is False and r.tasks.reconstruction is True
    assert r.weighting == "fixed" and r.alphas == (1.0, 0.5, 0.25)
    assert r.optim.lr == 3e-4 and r.seed == 9 and r.max_steps == 7
    assert r.corruption.drop_fraction == (0.2, 0.4)
    assert r.corruption.patch_size == r.model.patch_size
    assert cfg.finetune.steps == 11 and cfg.finetune.optim.lr == 1e-4 and cfg.probe.steps == 13


@pytest.mark.parametrize(
    "key,value",
    [("model", "huge"), ("tasks", "x"), ("optim.lr.x", "1"), ("alphas", "1,2"), ("tasks.rotation", "maybe")],
)
def test_bad_settings(key, value):
    with pytest.raises((UsageError, ValueError)):
        apply_setting(CliConfig(), key, value)


def test_config_line_without_equals():
    with pytest.raises(UsageError):
        parse_config_lines(["model tiny-cifar"])


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--sample", "6"]) == 0
    out = capsys.readouterr().out
    assert "model/uncertainty_total" in out and "FAIL" not in out


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    code = main(["linprobe", "--checkpoint", str(tmp_path / "none.sitc"), "--dataset", "synthetic:n=8,size=16"])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_end_to_end_commands(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", *MINI, "-o", "max_steps=6", "-o", f"out_dir={run}"]) == 0
    ckpt = run / "final.sitc"
    assert ckpt.exists() and (run / "metrics.csv").exists()
    assert capsys.readouterr().out.startswith("step 6:")
    data = ["--dataset", "synthetic:n=32,classes=2,size=16,seed=0"]
    report = tmp_path / "reports.csv"
    assert main(["linprobe", "--checkpoint", str(ckpt), *data, "-o", "probe.steps=10", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("protocol,dataset")
    assert main(["transfer", "--checkpoint", str(ckpt), "--dataset", "synthetic:n=16,classes=3,size=24,seed=1", "-o", "probe.steps=5"]) == 0
    assert main(["finetune", "--checkpoint", str(ckpt), *data, "-o", "finetune.steps=2", "--out", str(tmp_path / "ft.sitc")]) == 0
    assert (tmp_path / "ft.sitc").exists()
    assert main(["fewshot", "--checkpoint", str(ckpt), *data, "--percent", "50", "-o", "finetune.steps=2", "-o", "probe.steps=5", "--report", str(report)]) == 0
    rows = report.read_text().splitlines()
    assert rows[0].startswith("protocol") and len(rows) == 4
    assert main(["preview", "--checkpoint", str(ckpt), *data, "--count", "2", "--out-dir", str(tmp_path / "pv")]) == 0
    assert len(list((tmp_path / "pv").iterdir())) == 6
    assert main(["corrupt-preview", *MINI, "--count", "3", "--out-dir", str(tmp_path / "cp")]) == 0
    assert len(list((tmp_path / "cp").iterdir())) == 6
    # resume from the final checkpoint with a larger step budget
    assert main(["pretrain", *MINI, "-o", "max_steps=8", "-o", f"out_dir={run}", "--resume", str(ckpt)]) == 0


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "sit.cli", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1 and "nonsense" in proc.stderr
