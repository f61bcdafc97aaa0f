import json
import subprocess
import sys

import pytest

from tmignn.cli import main
from tmignn.metrics import parse_report
from tmignn.model import ModelConfig, ModelParams, save_checkpoint
from tmignn.train import read_history

SMALL = ["--dim", "8", "--layers", "1", "--epochs", "2", "--lr", "0.01", "--batch-size", "64", "-q"]


@pytest.fixture
def synth_ds(tmp_path):
    path = tmp_path / "s.ds"
    assert main(["synth", str(path), "--sessions", "120", "--seed", "7"]) == 0
    return path


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_preprocess(tmp_path, capsys):
    log = tmp_path / "log.csv"
    rows = ["session_id,item_id,timestamp"]
    for s in range(12):
        for k, item in enumerate(["a", "b", "c", "d"]):
            rows.append(f"{s},{item},{s * 10000 + k * 5}")
    log.write_text("\n".join(rows) + "\n")
    out_path = tmp_path / "d.ds"
    code, out, _ = run(capsys, ["preprocess", str(log), str(out_path), "--min-len", "3", "--min-freq", "5", "--test-frac", "0.25"])
    assert code == 0
    assert "items 4 train 27 test 9" in out
    assert out_path.read_text().startswith("# tmignn-dataset 1")
    code, out, _ = run(capsys, ["preprocess", str(log), str(out_path), "--gap-split", "7", "--min-len", "2", "--min-freq", "1"])
    assert code == 0


def test_synth_writes_dataset_and_labels(tmp_path, capsys):
    code, out, _ = run(capsys, ["synth", str(tmp_path / "x.ds"), "--sessions", "20", "--pools", "3"])
    assert code == 0
    assert (tmp_path / "x.labels").exists()
    assert "items 60" in out


def test_train_then_eval_reproduces_validation(tmp_path, synth_ds, capsys):
    ckpt, log = tmp_path / "m.npz", tmp_path / "log.jsonl"
    code, _, _ = run(capsys, ["train", str(synth_ds), "--checkpoint", str(ckpt), "--log", str(log), "--validate", *SMALL])
    assert code == 0
    history = read_history(log)
    assert [r["epoch"] for r in history] == [0, 1, 2]
    assert {"loss", "lr", "wall_time", "H@10", "N@20"} <= set(history[-1])
    code, out, _ = run(capsys, ["eval", str(synth_ds), "--checkpoint", str(ckpt), "--json"])
    assert code == 0
    metrics = json.loads(out)["model"]
    for key in ("H@10", "H@20", "N@10", "N@20"):
        assert metrics[key] == history[-1][key]


def test_train_is_deterministic_given_seed(tmp_path, synth_ds, capsys):
    logs = []
    for k in range(2):
        log = tmp_path / f"l{k}.jsonl"
        assert main(["train", str(synth_ds), "--checkpoint", str(tmp_path / f"m{k}.npz"), "--log", str(log), "--seed", "3", *SMALL]) == 0
        logs.append([r["loss"] for r in read_history(log)])
    assert logs[0] == logs[1]
    assert (tmp_path / "m0.npz").read_bytes() == (tmp_path / "m1.npz").read_bytes()


def test_config_file_and_flag_override(tmp_path, synth_ds, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("dim = 4\nlayers = 1\nepochs = 1\nlr = 0.01\n")
    ckpt = tmp_path / "m.npz"
    assert main(["train", str(synth_ds), "--checkpoint", str(ckpt), "--config", str(cfg), "--dim", "6", "-q"]) == 0
    from tmignn.model import load_checkpoint

    params, _ = load_checkpoint(ckpt)
    assert params.config.dim == 6 and params.config.n_layers == 1
    cfg.write_text("colour = red\n")
    assert main(["train", str(synth_ds), "--checkpoint", str(ckpt), "--config", str(cfg), "-q"]) == 2


def test_eval_popularity_same_schema(tmp_path, synth_ds, capsys):
    code, out, _ = run(capsys, ["eval", str(synth_ds), "--popularity"])
    assert code == 0
    assert out.splitlines()[0] == "model\tH@10\tH@20\tN@10\tN@20"
    assert set(parse_report(out)) == {"popularity"}


def toy_checkpoint(path, n_items=5, H=2):
    cfg = ModelConfig(n_items=n_items, dim=4, n_interests=H, n_layers=1, max_step=10)
    save_checkpoint(path, ModelParams.initialize(cfg, 7))


def test_predict_format(tmp_path, capsys):
    ckpt = tmp_path / "toy.npz"
    toy_checkpoint(ckpt)
    code, out, _ = run(
        capsys,
        ["predict", "--checkpoint", str(ckpt), "--items", "0 3 1", "--timestamps", "0 5 3600", "--topk", "5", "--dump-graph", str(tmp_path / "g.txt")],
    )
    assert code == 0
    lines = out.splitlines()
    scored = lines[:5]
    assert sorted(int(l.split("\t")[0]) for l in scored) == [0, 1, 2, 3, 4]
    values = [float(l.split("\t")[1]) for l in scored]
    assert values == sorted(values, reverse=True)
    assert lines[5] == "alpha\t0\t3\t1"
    assert len(lines) == 5 + 1 + 2
    for row in lines[6:]:
        weights = [float(x) for x in row.split("\t")[1:]]
        assert len(weights) == 3 and abs(sum(weights) - 1) < 1e-5
    assert (tmp_path / "g.txt").read_text().startswith("items 0 3 1")


def test_predict_session_file_and_vocabulary(tmp_path, synth_ds, capsys):
    ckpt = tmp_path / "m.npz"
    assert main(["train", str(synth_ds), "--checkpoint", str(ckpt), *SMALL]) == 0
    sess = tmp_path / "one.csv"
    sess.write_text("session_id,item_id,timestamp\nq,3,0\nq,7,20\n")
    code, out, _ = run(capsys, ["predict", "--checkpoint", str(ckpt), "--session-file", str(sess), "--topk", "3"])
    assert code == 0
    assert len(out.splitlines()) == 3 + 1 + 2


def test_ablate_rows(tmp_path, capsys):
    ds = tmp_path / "a.ds"
    assert main(["synth", str(ds), "--sessions", "60", "--seed", "7"]) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, ["ablate", str(ds), "--dim", "6", "--layers", "1", "--epochs", "1", "--lr", "0.01", "--seed", "7", "-q"])
    assert code == 0
    table = parse_report(out)
    assert list(table) == ["full", "-V2V", "-U2V", "-Last", "First", "-Interest", "-Loss"]


@pytest.mark.parametrize(
    "argv, code",
    [
        (["eval", "missing.ds", "--popularity"], 3),
        (["train"], 2),
        (["nonsense"], 2),
        (["predict", "--checkpoint", "missing.npz", "--items", "1"], 3),
        (["eval", "{ds}", "--ks", "a,b", "--popularity"], 2),
        (["eval", "{ds}"], 2),
        (["train", "{ds}", "--checkpoint", "x.npz", "--ablation", "-Last", "--ablation", "First"], 2),
    ],
)
def test_exit_codes(argv, code, synth_ds, capsys, monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    argv = [a.replace("{ds}", str(synth_ds)) for a in argv]
    got = main(argv)
    _, err = capsys.readouterr()
    assert got == code
    assert err.strip()


def test_predict_data_errors(tmp_path, capsys):
    ckpt = tmp_path / "toy.npz"
    toy_checkpoint(ckpt)
    assert main(["predict", "--checkpoint", str(ckpt), "--items", "0 9", "--timestamps", "0 1"]) == 3
    assert main(["predict", "--checkpoint", str(ckpt), "--items", "0 1", "--timestamps", "5 1"]) == 3
    assert main(["predict", "--checkpoint", str(ckpt), "--items", "0 1", "--timestamps", "0"]) == 3
    assert main(["predict", "--checkpoint", str(ckpt)]) == 2
    assert main(["predict", "--checkpoint", str(ckpt), "--items", "0", "--topk", "0"]) == 2
    bad = tmp_path / "bad.ds"
    bad.write_text("# tmignn-dataset 1\nitem_count 2\n[train]\ns\t0\tnoon\t1\n")
    assert main(["eval", str(bad), "--popularity"]) == 3
    err = capsys.readouterr().err
    assert all(len(line) > 0 for line in err.strip().splitlines())


def test_numeric_failure_exit_code(tmp_path, capsys):
    import numpy as np

    cfg = ModelConfig(n_items=5, dim=4, n_interests=2, n_layers=1, max_step=10)
    params = ModelParams.initialize(cfg, 7)
    params["readout.b"].data[:] = np.nan
    save_checkpoint(tmp_path / "nan.npz", params)
    assert main(["predict", "--checkpoint", str(tmp_path / "nan.npz"), "--items", "0 1", "--timestamps", "0 1"]) == 4


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "tmignn", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("preprocess", "synth", "train", "eval", "predict", "ablate"):
        assert sub in out.stdout
