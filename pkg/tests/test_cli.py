import os

import numpy as np
import pytest

from ltdistill.cli import KEYS, ConfigError, build_config, main

TINY = """
# desk-scale smoke configuration
num_classes = 3
feature_dim = 4
n_max = 24
beta = 4.0
noise_scale = 1.5
n_test_per_class = 30
hidden_widths = 8
num_experts = 2
rep_epochs = 6
cls_epochs = 3
ipc = 2
outer_steps = 8
n_rep = 2
n_cls = 1
m_rep = 1
m_cls = 1
t_rep = 2
t_plus_rep = 4
t_cls = 0
t_plus_cls = 1
eval_epochs = 40
eval_runs = 2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_defaults_cover_every_key():
    rc = build_config(None, [])
    for key in KEYS:
        assert hasattr(rc, key)
    assert len(rc.fingerprint) == 12


def test_config_file_and_overrides(tiny_cfg):
    rc = build_config(tiny_cfg, ["beta=9.0", "tag=x"])
    assert rc.beta == 9.0 and rc.tag == "x" and rc.num_classes == 3
    assert rc.hidden_widths == (8,)


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="bogus_key"):
        build_config(None, ["bogus_key=1"])


def test_beta_constraint_message():
    with pytest.raises(ConfigError, match="beta") as err:
        build_config(None, ["beta=0.5"])
    assert ">= 1" in str(err.value)


def test_type_error_named():
    with pytest.raises(ConfigError, match="outer_steps"):
        build_config(None, ["outer_steps=many"])


def test_fingerprint_stable_and_sensitive():
    a = build_config(None, ["beta=2.0"])
    b = build_config(None, ["beta=2.0"])
    c = build_config(None, ["beta=3.0"])
    assert a.fingerprint == b.fingerprint != c.fingerprint


def test_env_out_dir_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("LT_DISTILL_OUT", str(tmp_path / "env_out"))
    rc = build_config(None, ["out_dir=ignored"])
    assert rc.out_dir == str(tmp_path / "env_out")


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["gen-data", "--help"])
    assert exit_info.value.code == 0
    out = capsys.readouterr().out
    for key in KEYS:
        assert key in out
    assert "default=" in out and ">= 1" in out


def test_main_validation_exit_code(tmp_path, capsys):
    code = main(["gen-data", f"--out_dir={tmp_path}", "--beta=0.5"])
    assert code == 1
    assert "beta" in capsys.readouterr().err


def test_main_missing_file_exit_code(tmp_path, capsys):
    code = main(["eval", f"--out_dir={tmp_path}"])  # no synthetic.bin yet
    assert code == 1


def test_main_unknown_command_rejected(capsys):
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def _run(cmd, tiny_cfg, out_dir, *extra):
    return main([cmd, "--config", str(tiny_cfg), f"--out_dir={out_dir}", *extra])


def test_end_to_end_pipeline(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert _run("gen-data", tiny_cfg, out) == 0
    assert (out / "dataset_fingerprints.json").exists()
    assert _run("train-experts", tiny_cfg, out) == 0
    assert (out / "rep_00.traj").exists() and (out / "cls_01.traj").exists()
    assert _run("distill", tiny_cfg, out) == 0
    assert (out / "synthetic.bin").exists() and (out / "trace.csv").exists()
    assert _run("eval", tiny_cfg, out) == 0
    assert (out / "metrics_distilled.csv").exists()
    assert _run("baseline", tiny_cfg, out, "--baseline_method=random") == 0
    assert (out / "metrics_random.csv").exists()
    assert _run("baseline", tiny_cfg, out, "--baseline_method=kcenter") == 0
    assert _run("diag", tiny_cfg, out) == 0
    assert (out / "diag.csv").exists()
    assert _run("report", tiny_cfg, out) == 0
    report = (out / "report.txt").read_text()
    assert "distilled" in report and "random" in report and "kcenter" in report

    # fingerprint provenance is embedded in the CSV artifacts
    rc_fp = build_config(tiny_cfg, [f"out_dir={out}"]).fingerprint
    for name in ("trace.csv", "metrics_distilled.csv", "diag.csv"):
        assert (out / name).read_text().splitlines()[0] == f"# config_fingerprint={rc_fp}"


def test_rerun_is_byte_identical(tiny_cfg, tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        for cmd in ("train-experts", "distill", "eval"):
            assert _run(cmd, tiny_cfg, out) == 0
        outs.append(out)
    a, b = outs
    for name in ("rep_00.traj", "cls_00.traj", "synthetic.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for name in ("trace.csv", "metrics_distilled.csv"):
        assert (a / name).read_text() == (b / name).read_text()
