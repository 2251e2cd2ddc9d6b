import json

import pytest

from scnet import tensor as T
from scnet.cli import main

SMALL = {"tau": 0.1, "alpha_semantic": 0.1, "d": 16, "num_heads": 2, "max_q": 8, "max_ocr": 5,
         "max_obj": 4, "max_decode": 3, "n_vocab": 30, "d_ft": 8, "d_fr": 8, "icsp_hidden": 16,
         "q_layers": 1, "sct_layers": 1, "plain_layers": 1, "n_instances": 8,
         "n_eval_instances": 4, "batch_size": 4, "max_iters": 4, "warmup_iters": 1,
         "decay_steps": [3], "eval_interval": 2, "checkpoint_interval": 2}


def write_config(tmp_path, **over):
    vals = dict(SMALL, out_dir=str(tmp_path / "run"))
    vals.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(vals))
    return str(p)


def test_synth_train_eval_round_trip(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = tmp_path / "data"
    assert main(["synth", "--config", cfg, "--out", str(data)]) == 0
    assert (data / "train.jsonl").exists() and (data / "eval.jsonl").exists()
    capsys.readouterr()
    cfg2 = write_config(tmp_path, train_path=str(data / "train.jsonl"),
                        eval_path=str(data / "eval.jsonl"))
    assert main(["train", "--config", cfg2]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    run = tmp_path / "run"
    trained = json.loads((run / "metrics.json").read_text())
    assert summary["metrics"] == trained
    assert main(["eval", "--config", cfg2, "--checkpoint", str(run / "checkpoint_final.ckpt"),
                 "--out", str(tmp_path / "ev")]) == 0
    again = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert again == trained
    lines = (tmp_path / "ev" / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == 4


def test_eval_empty_dataset(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    (tmp_path / "empty.jsonl").write_text("")
    capsys.readouterr()
    code = main(["eval", "--config", cfg, "--checkpoint",
                 str(tmp_path / "run" / "checkpoint_final.ckpt"),
                 "--dataset", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "ev")])
    assert code == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["n_instances"] == 0 and rep["accuracy"] is None


def test_gradcheck_verb(tmp_path, capsys, monkeypatch):
    cfg = write_config(tmp_path)
    assert main(["gradcheck", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "coverage=100%" in out
    real = T._gelu_grad
    monkeypatch.setattr(T, "_gelu_grad", lambda x, t=None: 0.5 * real(x, t))
    assert main(["gradcheck", "--config", cfg]) == 2
    assert "ffn.fc1" in capsys.readouterr().err


def test_ablate_verb(tmp_path, capsys):
    cfg = write_config(tmp_path, max_iters=2, decay_steps=[1], ablation_seeds=[0, 1])
    assert main(["ablate", "--config", cfg]) == 0
    rows = json.loads((tmp_path / "run" / "ablation.json").read_text())
    assert len(rows) == 8 and {r["seed"] for r in rows} == {0, 1}
    assert "noSCT+noICSP" in capsys.readouterr().out


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", cfg, "--no-icsp", "--no-sct", "--seed", "3"]) == 0
    saved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert saved["use_icsp"] is False and saved["use_sct"] is False and saved["seed"] == 3


@pytest.mark.parametrize("argv", [[], ["train"], ["fly", "--config", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tau": 0.1}))
    assert main(["train", "--config", str(bad)]) == 1
    bad.write_text(json.dumps(dict(SMALL, learnign_rate=1)))
    assert main(["train", "--config", str(bad)]) == 1
    assert "learnign_rate" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    bad.write_text("{nope")
    assert main(["train", "--config", str(bad)]) == 3


def test_io_errors(tmp_path):
    corrupt = tmp_path / "c.jsonl"
    corrupt.write_text('{"instance_id": 1}\n')
    cfg = write_config(tmp_path, train_path=str(corrupt))
    assert main(["train", "--config", cfg]) == 3
    cfg = write_config(tmp_path, eval_path=str(corrupt))
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "none.ckpt")]) == 3
    good = write_config(tmp_path)
    assert main(["train", "--config", good]) == 0
    (tmp_path / "junk.ckpt").write_bytes(b"garbage!")
    (tmp_path / "vocab.txt").write_text((tmp_path / "run" / "vocab.txt").read_text())
    (tmp_path / "question_vocab.txt").write_text(
        (tmp_path / "run" / "question_vocab.txt").read_text())
    data = tmp_path / "d"
    main(["synth", "--config", good, "--out", str(data)])
    assert main(["eval", "--config", good, "--checkpoint", str(tmp_path / "junk.ckpt"),
                 "--dataset", str(data / "eval.jsonl")]) == 3
    assert main(["eval", "--config", good, "--checkpoint", "x.ckpt"]) == 1
