"""CLI tests: config parsing, subcommand smoke runs on a miniature dataset,
and exit-code conventions."""

import json
import os

import pytest

from slukit import cli
from slukit.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_run_config, main
from slukit.model import ConfigError, load_checkpoint


TINY_CONFIG = """\
[model]
d_model = 16
n_enc_layers = 1
n_dec_layers = 1
heads = 2
conv_kernel = 3
feat_dim = 8
vocab_size = 40
rel_pos_clip = 8
adapter_bottleneck = 4
dropout = 0.0

[train]
epochs = 2
batch_size = 8
peak_lr_enc = 0.002
peak_lr_dec = 0.003

[data]
n_train = 16
n_dev = 6
n_test = 6
feat_dim = 8
n_scenarios = 2
n_actions_per_scenario = 2
n_slot_types = 3
n_filler_words = 6
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_CONFIG)
    data = str(root / "data")
    assert main(["synth-data", "--config", str(cfg), "--out", data]) == EXIT_OK
    return {"root": root, "cfg": str(cfg), "data": data}


# ---------------------------------------------------------------------------
# config handling

def test_default_config_round_trip():
    rc = load_run_config(None)
    assert rc.decode.width == 32
    assert rc.decode.temperature == 1.25
    assert rc.sched.peak_lr_enc == 2e-3 and rc.sched.peak_lr_dec == 3e-3
    json.loads(cli.effective_config(rc))


def test_config_file_applies_values(workspace):
    rc = load_run_config(workspace["cfg"])
    assert rc.model.d_model == 16
    assert rc.train.epochs == 2
    assert rc.sched.peak_lr_enc == 0.002
    assert rc.data.n_train == 16


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[model]\nd_modle = 16\n")
    with pytest.raises(ConfigError, match="d_modle"):
        load_run_config(str(p))


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[modle]\nd_model = 16\n")
    with pytest.raises(ConfigError, match="modle"):
        load_run_config(str(p))


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/config.ini")


def test_boolean_coercion(tmp_path):
    p = tmp_path / "b.ini"
    p.write_text("[model]\nadapter_enabled = yes\n")
    assert load_run_config(str(p)).model.adapter_enabled is True
    p.write_text("[model]\nadapter_enabled = maybe\n")
    assert main(["synth-data", "--config", str(p), "--out", str(tmp_path / "d")]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# subcommand smoke tests (tiny model, tiny data)

def test_synth_data_wrote_splits(workspace):
    for split in ("train", "dev", "test"):
        assert os.path.exists(os.path.join(workspace["data"], f"{split}.jsonl"))
    assert os.path.exists(os.path.join(workspace["data"], "synth_config.json"))


def test_train_predict_score_pipeline(workspace, capsys):
    root, cfg, data = workspace["root"], workspace["cfg"], workspace["data"]
    ckpt = str(root / "m.ckpt")
    assert main(["train", "--config", cfg, "--data", data, "--out", ckpt,
                 "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "trainable params:" in out and "final train loss:" in out
    assert os.path.exists(ckpt) and os.path.exists(ckpt + ".log.csv")

    m = load_checkpoint(ckpt)
    assert m.kind == "e2e" and "target" in m.tokenizers

    pred = str(root / "dev.pred")
    jsonl = str(root / "dev.pred.jsonl")
    assert main(["predict", "--config", cfg, "--ckpt", ckpt, "--data", data,
                 "--split", "dev", "--out", pred, "--greedy",
                 "--jsonl", jsonl]) == EXIT_OK
    lines = open(pred).read().splitlines()
    assert len(lines) == 6
    from slukit import semantics as sem
    for line in lines:
        assert sem.canonicalize(line) == line   # predictions are canonical
    assert len(open(jsonl).read().splitlines()) == 6
    capsys.readouterr()

    assert main(["score", "--pred", pred, "--gold", data, "--split", "dev",
                 "--json"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["intent_accuracy"] <= 1.0
    assert report["n_utterances"] == 6

    assert main(["score", "--pred", pred, "--gold", data, "--split", "dev",
                 "--mode", "word"]) == EXIT_OK
    assert "entity F1" in capsys.readouterr().out


def test_train_freeze_and_adapter_flags(workspace, capsys):
    root, cfg, data = workspace["root"], workspace["cfg"], workspace["data"]
    ckpt = str(root / "frozen.ckpt")
    assert main(["train", "--config", cfg, "--data", data, "--out", ckpt,
                 "--epochs", "1", "--freeze-encoder", "--adapters"]) == EXIT_OK
    out = capsys.readouterr().out
    trainable, total = map(int, out.split("trainable params: ")[1].split("\n")[0].split(" / total "))
    assert trainable < total
    m = load_checkpoint(ckpt)
    assert any(".adapter" in n for n in m.params())
    assert not any(v for n, v in m.trainable.items()
                   if n.startswith("encoder.") and ".adapter" not in n)


def test_asr_proxy_then_init_encoder(workspace, capsys):
    root, cfg, data = workspace["root"], workspace["cfg"], workspace["data"]
    proxy = str(root / "proxy.ckpt")
    assert main(["asr-proxy-train", "--config", cfg, "--data", data,
                 "--out", proxy, "--epochs", "1"]) == EXIT_OK
    capsys.readouterr()
    ckpt = str(root / "warm.ckpt")
    assert main(["train", "--config", cfg, "--data", data, "--out", ckpt,
                 "--epochs", "1", "--init-encoder", proxy]) == EXIT_OK
    from slukit.model import encoder_checksum
    warm = load_checkpoint(ckpt)
    assert warm.kind == "e2e"


def test_cascade_eval(workspace, capsys):
    cfg, data = workspace["cfg"], workspace["data"]
    assert main(["cascade-eval", "--config", cfg, "--data", data,
                 "--wer", "0", "0.5", "--epochs", "1", "--json"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[oracle]" in out and "[wer=0.5]" in out
    payload = json.loads(out.strip().splitlines()[-1])
    assert set(payload) == {"0.0", "0.5"}


# ---------------------------------------------------------------------------
# exit codes

def test_exit_code_data_error(workspace, capsys):
    assert main(["train", "--config", workspace["cfg"], "--data",
                 "/nonexistent/dir", "--out", "/tmp/x.ckpt"]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err


def test_exit_code_usage_error(workspace, tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[model]\nnot_a_key = 3\n")
    assert main(["train", "--config", str(p), "--data", workspace["data"],
                 "--out", str(tmp_path / "x.ckpt")]) == EXIT_USAGE
    assert "config error" in capsys.readouterr().err


def test_exit_code_invalid_wer(workspace, capsys):
    assert main(["cascade-eval", "--config", workspace["cfg"],
                 "--data", workspace["data"], "--wer", "2.0",
                 "--epochs", "1"]) == EXIT_USAGE
    assert "config error" in capsys.readouterr().err


def test_score_row_count_mismatch(workspace, tmp_path, capsys):
    pred = tmp_path / "short.pred"
    pred.write_text("{'scenario': 'a', 'action': 'b', 'entities': []}\n")
    assert main(["score", "--pred", str(pred), "--gold", workspace["data"],
                 "--split", "dev"]) == EXIT_DATA
    assert "mismatch" in capsys.readouterr().err
