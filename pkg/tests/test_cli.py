import json
import re

import pytest

from ctrlsynth.cli import build_parser, env_overrides, load_config, main
from ctrlsynth.model.config import ModelConfig, TrainConfig
from ctrlsynth.trace import load_trace

from conftest import spec_path

TINY = {"model": {"d_model": 16, "n_blocks": 1, "mlp_hidden": 32, "n_heads": 2, "head_hidden": 8},
        "train": {"batch_size": 16, "lr": 0.003}}


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for var in list(__import__("os").environ):
        if var.startswith("CTRLSYNTH_"):
            monkeypatch.delenv(var)
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def subcommands():
    parser = build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices


@pytest.mark.parametrize("name", sorted(subcommands()))
def test_help_documents_every_flag(name, capsys):
    sp = subcommands()[name]
    with pytest.raises(SystemExit) as info:
        main([name, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for action in sp._actions:
        for opt in action.option_strings:
            assert opt in text
        if action.option_strings and action.dest != "help":
            assert action.help, f"{name} {action.option_strings} has no help text"
    for flag in ("--seed", "--threads", "--log-level"):
        assert flag in text


def test_simulate_is_reproducible(workdir):
    assert run("simulate", "--model", spec_path("oracle_4g"), "--n", 50, "--out", "a.jsonl", "--seed", 3) == 0
    assert run("simulate", "--model", spec_path("oracle_4g"), "--n", 50, "--out", "b.jsonl", "--seed", 3,
               "--threads", 1) == 0
    assert (workdir / "a.jsonl").read_bytes() == (workdir / "b.jsonl").read_bytes()
    assert len(load_trace(workdir / "a.jsonl", "4g")) == 50


def test_evaluate_self_is_zero(workdir):
    run("simulate", "--model", spec_path("oracle_4g"), "--n", 80, "--out", "r.jsonl", "--seed", 1)
    assert run("evaluate", "--real", "r.jsonl", "--synth", "r.jsonl", "--gen", "4g", "--out", "rep.json",
               "--memo", "5:0.1", "--samples-out", "cdf") == 0
    rep = json.loads((workdir / "rep.json").read_text())
    for group in ("sojourn_ks", "flow_length_ks", "breakdown_diff"):
        assert all(v == 0.0 for v in rep[group].values())
    assert rep["event_violation_rate"] == 0.0
    assert rep["memorization"] == {"n=5,eps=0.1": 1.0}
    cdf = json.loads((workdir / "cdf" / "flow_length_all.json").read_text())
    assert cdf["real"] == cdf["synth"]
    assert (workdir / "cdf" / "sojourn_IDLE.json").exists()
    assert run("evaluate", "--real", "r.jsonl", "--synth", "r.jsonl", "--gen", "4g", "--format", "table",
               "--out", "rep.txt") == 0
    assert "flow length max-y (all)" in (workdir / "rep.txt").read_text()


def test_train_generate_select_pipeline(workdir):
    run("simulate", "--model", spec_path("oracle_4g"), "--n", 40, "--out", "t.jsonl", "--seed", 1)
    run("simulate", "--model", spec_path("oracle_4g"), "--n", 20, "--out", "v.jsonl", "--seed", 2)
    assert run("train", "--trace", "t.jsonl", "--gen", "4g", "--config", "tiny.json", "--out", "ck",
               "--epochs", 20, "--ckpt-every", 5, "--validation", "v.jsonl") == 0
    names = sorted(p.name for p in (workdir / "ck").glob("ckpt_e*.bin"))
    assert names == ["ckpt_e0005.bin", "ckpt_e0010.bin", "ckpt_e0015.bin", "ckpt_e0020.bin"]
    log = json.loads((workdir / "ck" / "train_log.json").read_text())
    assert len(log["history"]) == 20 and log["config"]["model"]["d_model"] == 16

    assert run("select-checkpoint", "--dir", "ck", "--validation", "v.jsonl", "--n", 20,
               "--out", "best.bin", "--report", "sel.json") == 0
    sel = json.loads((workdir / "sel.json").read_text())
    assert len(sel["candidates"]) == 4 and sel["epoch"] in (5, 10, 15, 20)

    assert run("generate", "--ckpt", "best.bin", "--n", 25, "--out", "s1.jsonl", "--seed", 9) == 0
    assert run("generate", "--ckpt", "best.bin", "--n", 25, "--out", "s2.jsonl", "--seed", 9) == 0
    assert (workdir / "s1.jsonl").read_bytes() == (workdir / "s2.jsonl").read_bytes()
    synth = load_trace(workdir / "s1.jsonl", "4g")
    assert len(synth) == 25 and max(len(s) for s in synth.streams) <= 500

    assert run("memcheck", "--real", "t.jsonl", "--synth", "s1.jsonl", "--gen", "4g", "--n", 3,
               "--out", "mem.json") == 0
    assert "n=3,eps=0.1" in json.loads((workdir / "mem.json").read_text())

    assert run("finetune", "--ckpt", "best.bin", "--trace", "v.jsonl", "--config", "tiny.json",
               "--epochs", 5, "--ckpt-every", 5, "--out", "ft") == 0
    assert len(list((workdir / "ft").glob("ckpt_e*.bin"))) == 1
    assert run("show-ckpt", "--ckpt", "best.bin", "--out", "hdr.json") == 0
    assert json.loads((workdir / "hdr.json").read_text())["tokenizer_config"]["generation"] == "4g"


def test_train_is_byte_reproducible(workdir):
    run("simulate", "--model", spec_path("oracle_4g"), "--n", 20, "--out", "t.jsonl", "--seed", 1)
    for out in ("a", "b"):
        assert run("train", "--trace", "t.jsonl", "--gen", "4g", "--config", "tiny.json", "--out", out,
                   "--epochs", 2, "--ckpt-every", 2, "--seed", 5) == 0
    for name in ("ckpt_e0002.bin", "train_log.json"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_fit_smm_and_show(workdir, capsys):
    run("simulate", "--model", spec_path("oracle_4g"), "--n", 60, "--out", "t.jsonl")
    assert run("fit-smm", "--trace", "t.jsonl", "--gen", "4g", "--out", "m.json") == 0
    assert run("simulate", "--model", "m.json", "--n", 10, "--out", "again.jsonl") == 0
    capsys.readouterr()
    assert run("show-smm", "--model", "m.json") == 0
    assert "semi-Markov model" in capsys.readouterr().out


def test_gradcheck_exit_codes(workdir, capsys):
    assert run("gradcheck") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["passed"] and out["max_relative_error"] < 1e-4
    assert run("gradcheck", "--tol", 1e-30, "--length", 3) == 1


def test_state_table(workdir, capsys):
    assert run("state-table", "--gen", "5g") == 0
    text = capsys.readouterr().out
    assert "IDLE/AN_REL_S, SRV_REQ -> CONNECTED/SRV_REQ_S" in text
    assert "TAU" not in text


def test_errors_give_nonzero_exit(workdir, capsys):
    assert run("evaluate", "--real", "missing.jsonl", "--synth", "x", "--gen", "4g") != 0
    assert "missing.jsonl" in capsys.readouterr().err
    (workdir / "bad.json").write_text(json.dumps({"model": {"d_modle": 3}}))
    assert run("print-config", "--config", "bad.json") != 0
    assert "d_modle" in capsys.readouterr().err
    (workdir / "bad2.json").write_text(json.dumps({"model": {"d_model": 127}}))
    assert run("print-config", "--config", "bad2.json") != 0
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code != 0


def test_print_config_dumps_defaults(workdir, capsys):
    assert run("print-config") == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["model"]["d_model"] == 128 and doc["model"]["n_blocks"] == 2
    assert doc["model"]["mlp_hidden"] == 1024 and doc["model"]["max_context"] == 500
    assert doc["train"]["lr"] == 3e-4 and doc["train"]["weights"] == {"w_event": 1.0, "w_arrival": 1.0, "w_stop": 1.0}


def test_config_precedence(workdir, monkeypatch):
    monkeypatch.setenv("CTRLSYNTH_MODEL_D_MODEL", "32")
    monkeypatch.setenv("CTRLSYNTH_MODEL_DISTRIBUTION_HEAD", "false")
    monkeypatch.setenv("CTRLSYNTH_TRAIN_W_STOP", "2.5")
    monkeypatch.setenv("CTRLSYNTH_TRAIN_EPOCHS", "10")
    model, train = load_config(workdir / "tiny.json", flags={"train": {"epochs": 7}})
    assert model.d_model == 32  # env beats file
    assert model.n_blocks == 1  # file beats default
    assert model.distribution_head is False
    assert train.weights.w_stop == 2.5
    assert train.epochs == 7  # flag beats env
    assert load_config() == (ModelConfig(d_model=32, distribution_head=False),
                             TrainConfig(epochs=10, weights=TrainConfig().weights.__class__(1, 1, 2.5)))


def test_env_override_errors():
    with pytest.raises(ValueError, match="CTRLSYNTH_MODEL_WIDTH"):
        env_overrides({"CTRLSYNTH_MODEL_WIDTH": "3"})
    with pytest.raises(ValueError, match="not a valid int"):
        env_overrides({"CTRLSYNTH_MODEL_D_MODEL": "big"})
    assert env_overrides({"OTHER": "1"}) == {"model": {}, "train": {}}


def test_memo_flag_parsing(workdir):
    with pytest.raises(SystemExit):
        main(["evaluate", "--real", "a", "--synth", "b", "--gen", "4g", "--memo", "20"])


def test_readme_mentions_every_subcommand():
    import pathlib

    readme = (pathlib.Path(__file__).resolve().parents[1] / "README.md").read_text()
    for name in subcommands():
        assert re.search(rf"\b{re.escape(name)}\b", readme), name
