import json
import os
import subprocess
import sys

import numpy as np
import pytest

from wdlab.checkpoint import read_checkpoint
from wdlab.cli import emit_plotdata, main, resolve_out
from wdlab.errors import InvalidInputError

TRAIN = {
    "seed": 0,
    "arch": {"d": 6, "widths": [4, 4]},
    "data": {"source": "synthetic", "n": 10},
    "train": {"eta": 0.2, "lam": 0.01, "steps": 50, "checkpoint_every": 10},
}


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv("WDLAB_OUT", raising=False)


def test_train_outputs_and_determinism(tmp_path):
    cfg = write(tmp_path, "t.json", TRAIN)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in ("trajectory.csv", "final.nwt", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "trajectory.csv").read_text().splitlines()[0]
    assert header == "step_or_time,L,L_lambda,residual,srank_1,srank_2,srank_3"
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man["artifacts"]) >= {"trajectory.csv", "final.nwt"}
    assert read_checkpoint(tmp_path / "a" / "final.nwt").meta["config_sha256"] == man["config_sha256"]


def test_seed_override_changes_output(tmp_path):
    cfg = write(tmp_path, "t.json", TRAIN)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_config_error_exit_2(tmp_path, capsys):
    bad = json.loads(json.dumps(TRAIN))
    bad["train"]["eta"] = -1
    assert main(["train", "--config", write(tmp_path, "b.json", bad), "--out", str(tmp_path / "o")]) == 2
    assert "train.eta" in capsys.readouterr().err
    assert main(["train", "--config", write(tmp_path, "t.json", TRAIN), "--jobs", "0"]) == 2


def test_divergence_exit_3(tmp_path):
    doc = {
        "arch": {"d": 10, "widths": [8, 8], "activation": "identity"},
        "data": {"source": "synthetic", "n": 20},
        "train": {"eta": 50, "lam": 0, "steps": 200, "init": "scaled_gaussian", "init_scale": 3, "checkpoint_every": 1},
    }
    with np.errstate(all="ignore"):
        assert main(["train", "--config", write(tmp_path, "d.json", doc), "--out", str(tmp_path / "o")]) == 3
    ck = read_checkpoint(tmp_path / "o" / "last_finite.nwt")
    assert all(np.all(np.isfinite(t)) for t in ck.tensors.values())


def test_wdlab_out_precedence(tmp_path, monkeypatch):
    assert resolve_out("train", None, {}) == resolve_out("train", None, {})
    assert str(resolve_out("train", "x", {"out": "y"})) == "x"
    assert str(resolve_out("train", None, {"out": "y"})) == "y"
    monkeypatch.setenv("WDLAB_OUT", str(tmp_path / "env"))
    assert resolve_out("train", "x", {"out": "y"}) == tmp_path / "env"
    gen = {"d": 4, "tasks": {"a": {"n": 3, "subspace": [0, 1]}, "b": {"n": 3, "subspace": [2, 3], "heldout": 2}}}
    assert main(["gen-data", "--config", write(tmp_path, "g.json", gen), "--out", str(tmp_path / "flag")]) == 0
    assert not (tmp_path / "flag").exists()
    doc = json.loads((tmp_path / "env" / "datasets.json").read_text())
    assert doc["eps"]["a|b"] == 0.0
    assert (tmp_path / "env" / "task_b_heldout.csv").exists()


def test_polish_gf_merge_inspect(tmp_path):
    pol = {
        "arch": {"d": 4, "widths": [3], "activation": "identity"},
        "data": {"source": "synthetic", "n": 6},
        "train": {"eta": 0.5, "lam": 0.05, "steps": 200},
        "polish": {"tol": 1e-9},
    }
    assert main(["polish", "--config", write(tmp_path, "p.json", pol), "--out", str(tmp_path / "p")]) == 0
    rep = json.loads((tmp_path / "p" / "report.json").read_text())
    assert rep["meta"]["converged"] and rep["residual"] < 1e-8
    gf = {
        "arch": {"d": 4, "widths": [3], "activation": "identity"},
        "data": {"source": "synthetic", "n": 5},
        "gf": {"lam": 0.1, "T": 0.5, "h": 0.01},
    }
    assert main(["gf", "--config", write(tmp_path, "g.json", gf), "--out", str(tmp_path / "g")]) == 0
    inv = np.genfromtxt(tmp_path / "g" / "invariants.csv", delimiter=",", names=True)
    assert np.all(inv["integral"] <= inv["integral_bound"] + 1e-12)
    merge = {"d": 8, "n": 10, "m": 6, "steps": 30, "n_heldout": 5, "checkpoint_every": 10}
    assert main(["merge", "--config", write(tmp_path, "m.json", merge), "--out", str(tmp_path / "m")]) == 0
    for name in ("merge_losses.csv", "merge_losses_heldout.csv", "gap_bound_task_a.csv", "srank.csv", "summary.json"):
        assert (tmp_path / "m" / name).exists()
    ins = {"checkpoint": str(tmp_path / "p" / "polished.nwt"), "groups": {"hidden": ["W1"]}}
    assert main(["inspect", "--config", write(tmp_path, "i.json", ins), "--out", str(tmp_path / "i")]) == 0
    assert "hidden" in (tmp_path / "i" / "layer_report.csv").read_text()


def test_rank_sweep_small(tmp_path):
    sw = {"d": 5, "n": 20, "widths": [3, 3], "lambdas": [0.001, 0.01], "epochs": 3, "batch_size": 8}
    assert main(["rank-sweep", "--config", write(tmp_path, "s.json", sw), "--out", str(tmp_path / "s"), "--jobs", "2"]) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,avg_inv_stable_rank,classification_error,margin_error,avg_loss"
    assert len(lines) == 3


def test_inspect_bad_file_exit_1(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"\x01\x02")
    ins = {"checkpoint": str(tmp_path / "x.bin")}
    assert main(["inspect", "--config", write(tmp_path, "i.json", ins), "--out", str(tmp_path / "i")]) == 1


def test_emit_plotdata_empty(tmp_path):
    with pytest.raises(InvalidInputError):
        emit_plotdata([], tmp_path / "x.csv", ["a"])


def test_console_script(tmp_path):
    env = {**os.environ, "WDLAB_OUT": str(tmp_path / "o")}
    bad = write(tmp_path, "b.json", {"arch": {"d": 1}})
    r = subprocess.run([sys.executable, "-m", "wdlab", "train", "--config", bad], env=env, capture_output=True, text=True)
    assert r.returncode == 2 and "data" in r.stderr
