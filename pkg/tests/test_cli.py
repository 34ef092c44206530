import json

import pytest

from decore.cli import main
from decore.data import load_idx
from decore.training import load_checkpoint

CONFIG = {
    "train": {"epochs": 3, "policy_stop_epoch": 2, "widths": [4, 6], "fc_width": 8, "batch_size": 32,
              "policy_lr": 1.0, "penalty": 0.5},
    "data": {"kind": "synthetic", "n": 96, "eval_n": 40, "classes": 4, "shape": [1, 8, 8], "seed": 0,
             "eval_seed": 1},
    "pretrain_epochs": 2,
}


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps(CONFIG))
    return tmp_path


def read(p):
    return p.read_bytes()


def test_train_writes_artifacts_deterministically(work):
    assert main(["train", "--config", "c.json", "--seed", "1", "--out", "a.json"]) == 0
    assert main(["train", "--config", "c.json", "--seed", "1", "--out", "b.json"]) == 0
    for suffix in (".json", ".pruned.json", ".metrics.csv", ".report.json", ".layers.csv"):
        assert read(work / f"a{suffix}") == read(work / f"b{suffix}"), suffix
    ck = load_checkpoint(work / "a.json")
    cfg = ck.extra["effective_config"]
    assert cfg["train"]["seed"] == 1 and cfg["train"]["epochs"] == 3     # flag > file > default
    assert cfg["train"]["network_lr"] == 0.001
    assert (work / "a.metrics.csv").read_text().startswith("epoch,batch,loss,")
    assert not list(work.glob("*.tmp*"))


def test_lambda_flag_overrides_file(work):
    assert main(["train", "--config", "c.json", "--lambda", "7", "--out", "a.json"]) == 0
    assert load_checkpoint(work / "a.json").config.penalty == 7.0


@pytest.fixture
def trained(work):
    assert main(["train", "--config", "c.json", "--out", "ckpt.json"]) == 0
    return work


def test_eval(trained, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "ckpt.json", "--out", "e1.json"]) == 0
    acc = json.loads(capsys.readouterr().out)["accuracy"]
    assert 0 <= acc <= 1
    main(["eval", "--checkpoint", "ckpt.json", "--out", "e2.json"])
    assert read(trained / "e1.json") == read(trained / "e2.json")


def test_prune_and_report(trained):
    assert main(["prune", "--checkpoint", "ckpt.json", "--out", "p1.json", "--evaluate"]) == 0
    assert main(["prune", "--checkpoint", "ckpt.json", "--out", "p2.json", "--evaluate"]) == 0
    assert read(trained / "p1.json") == read(trained / "p2.json")
    assert read(trained / "p1.report.json") == read(trained / "p2.report.json")
    assert main(["report", "--checkpoint", "p1.json", "--out", "r.json", "--layers-csv", "l.csv"]) == 0
    rep = json.loads((trained / "r.json").read_text())
    direct = json.loads((trained / "ckpt.report.json").read_text())
    assert rep["params_after"] == direct["params_after"]
    assert rep["params_pruned_rate"] == direct["params_pruned_rate"]
    assert (trained / "l.csv").read_text().splitlines()[0] == "node,name,kind,channels_before,channels_after"


def test_search(trained):
    size = json.loads((trained / "ckpt.report.json").read_text())["params_before"] * 4
    args = ["search", "--checkpoint", "ckpt.json", "--max-bytes", str(size // 2), "--fine-tune-epochs", "1"]
    assert main(args + ["--out", "s1.json", "--checkpoint-out", "s1.ckpt.json"]) == 0
    assert main(args + ["--out", "s2.json", "--checkpoint-out", "s2.ckpt.json"]) == 0
    assert read(trained / "s1.json") == read(trained / "s2.json")
    assert read(trained / "s1.ckpt.json") == read(trained / "s2.ckpt.json")
    doc = json.loads((trained / "s1.json").read_text())
    assert doc["verify_constraint"] is True and doc["measured"] <= size // 2
    assert main(["search", "--checkpoint", "ckpt.json", "--max-bytes", "10", "--out", "x.json"]) == 1
    assert not (trained / "x.json").exists()


def test_ablate_appends(trained, capsys):
    assert main(["ablate", "--checkpoint", "ckpt.json", "--k", "2", "--order", "highest", "--csv", "ab.csv"]) == 0
    assert main(["ablate", "--checkpoint", "ckpt.json", "--k", "2", "--order", "lowest", "--csv", "ab.csv"]) == 0
    lines = (trained / "ab.csv").read_text().splitlines()
    assert lines[0] == "checkpoint,order,k,accuracy"
    assert [l.split(",")[1] for l in lines[1:]] == ["highest", "lowest"]
    assert main(["ablate", "--checkpoint", "ckpt.json", "--k", "9999", "--order", "lowest", "--csv", "ab.csv"]) == 1
    assert len((trained / "ab.csv").read_text().splitlines()) == 3


def test_sweep(work):
    args = ["sweep", "--config", "c.json", "--lambdas", "0.5,500", "--epochs", "2", "--policy-stop-epoch", "1"]
    assert main(args + ["--out", "s1.csv"]) == 0
    assert main(args + ["--out", "s2.csv"]) == 0
    assert read(work / "s1.csv") == read(work / "s2.csv")
    lines = (work / "s1.csv").read_text().splitlines()
    assert lines[0] == "lambda,accuracy_before,accuracy_after,params_pruned_rate,flops_pruned_rate"
    assert [l.split(",")[0] for l in lines[1:]] == ["0.5", "500.0"]


def test_synth_data_round_trip(work):
    assert main(["synth-data", "--n", "20", "--classes", "4", "--shape", "1,8,8", "--out", "a"]) == 0
    assert main(["synth-data", "--n", "20", "--classes", "4", "--shape", "1,8,8", "--out", "b"]) == 0
    assert read(work / "a-images-idx3-ubyte") == read(work / "b-images-idx3-ubyte")
    ds = load_idx(work / "a-images-idx3-ubyte", work / "a-labels-idx1-ubyte", 4)
    assert ds.images.shape == (20, 1, 8, 8)


def test_train_from_idx(work):
    main(["synth-data", "--n", "64", "--classes", "4", "--shape", "1,8,8", "--out", "tr"])
    main(["synth-data", "--n", "32", "--classes", "4", "--shape", "1,8,8", "--seed", "1", "--out", "ev"])
    cfg = dict(CONFIG, data={"kind": "idx", "train_images": "tr-images-idx3-ubyte",
                             "train_labels": "tr-labels-idx1-ubyte", "eval_images": "ev-images-idx3-ubyte",
                             "eval_labels": "ev-labels-idx1-ubyte", "num_classes": 4})
    (work / "i.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", "i.json", "--out", "i.ckpt.json"]) == 0


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--nope", "1", "--out", "x"], []])
def test_usage_errors_exit_2(work, argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_structured_errors(work, capsys):
    assert main(["eval", "--checkpoint", "missing.json"]) == 1
    assert "error" in capsys.readouterr().err
    (work / "bad.json").write_text("{")
    assert main(["train", "--config", "bad.json", "--out", "x.json"]) == 1
    (work / "u.json").write_text(json.dumps({"nonsense": 1}))
    assert main(["train", "--config", "u.json", "--out", "x.json"]) == 1
    assert "unknown" in capsys.readouterr().err
    assert not (work / "x.json").exists()
