import json

import pytest
import torch

from crowdkd.arch import load_checkpoint
from crowdkd.cli import dispatch, parse_overrides
from crowdkd.train import ConfigError


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert dispatch(["synth", "--n", "3", "--test-n", "2", "--shape", "32", "32", "--counts", "2", "6",
                     "--seed", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def teacher_ckpt(data_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("teacher")
    assert dispatch(["train-teacher", "--data-root", str(data_root), "--out", str(out),
                     "--epochs", "1", "--set", "flip_prob=0.0"]) == 0
    return out / "teacher.pt"


def test_synth_refuses_overwrite(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--n", "2", "--test-n", "0", "--out", tmp_path)
    assert code == 0
    assert json.loads((tmp_path / "resolved_config.json").read_text())["n"] == 2
    code, _, err = run(capsys, "synth", "--n", "2", "--out", tmp_path)
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["error"] == "FileExistsError"
    code, _, _ = run(capsys, "synth", "--n", "2", "--out", tmp_path, "--force")
    assert code == 0


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "bogus")[0] == 2
    code, _, err = run(capsys, "synth", "--out", "x", "--no-such-flag")
    assert code == 2
    assert json.loads(err.strip())["error"] == "usage"
    assert run(capsys, "distill", "--data-root", "d", "--out", "o", "--supervision", "soft")[0] == 2


def test_config_errors_exit_3(capsys, data_root, tmp_path):
    code, _, err = run(capsys, "distill", "--data-root", data_root, "--out", tmp_path, "--cpr", "2/3")
    assert code == 3
    assert json.loads(err.strip())["error"] == "config"
    assert run(capsys, "distill", "--data-root", data_root, "--out", tmp_path, "--set", "lr_typo=1")[0] == 3
    bad = tmp_path / "plan.json"
    bad.write_text(json.dumps({"lambda1": -1}))
    assert run(capsys, "distill", "--data-root", data_root, "--out", tmp_path, "--config", bad)[0] == 3


def test_missing_dataset_is_reported(capsys, tmp_path):
    code, _, err = run(capsys, "train-teacher", "--data-root", tmp_path / "none", "--out", tmp_path)
    assert code == 1
    assert "manifest" in json.loads(err.strip())["message"]


def test_overrides_parse_json_values():
    assert parse_overrides(["epochs=3", "crop=[32,32]", "teacher=toy"]) == {
        "epochs": 3, "crop": [32, 32], "teacher": "toy"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def test_pipeline(capsys, data_root, teacher_ckpt, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"epochs": 5, "flip_prob": 0.0, "lambda1": 0.1}))
    out = tmp_path / "distill"
    code, _, _ = run(capsys, "distill", "--config", plan, "--data-root", data_root, "--out", out,
                     "--teacher-checkpoint", teacher_ckpt, "--epochs", "1", "--rounds", "1",
                     "--supervision", "hard+soft")
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    # flags beat the config file, which beats the defaults
    assert resolved["epochs"] == 1 and resolved["lambda1"] == 0.1 and resolved["lambda2"] == 0.5
    assert resolved["supervision"] == "hard_plus_soft" and resolved["rounds"] == 1
    assert len((out / "log.jsonl").read_text().splitlines()) == 1

    code, stdout, _ = run(capsys, "evaluate", "--checkpoint", out / "student.pt", "--data-root", data_root,
                          "--game-max-l", "2", "--dump-maps", tmp_path / "maps", "--out", tmp_path / "ev")
    assert code == 0
    result = json.loads(stdout)
    assert result["n"] == 2 and set(result["game"]) == {"0", "1", "2"}
    assert len(list((tmp_path / "maps").glob("*.png"))) == 2
    assert json.loads((tmp_path / "ev" / "resolved_config.json").read_text())["rounds"] == 1


def test_wrap_reexports(capsys, teacher_ckpt, tmp_path):
    out = tmp_path / "wrapped.pt"
    code, _, _ = run(capsys, "wrap", "--checkpoint", teacher_ckpt, "--rounds", "3", "--out", out)
    assert code == 0
    a, b = load_checkpoint(teacher_ckpt), load_checkpoint(out)
    assert b.review_rounds == 3
    for k, v in a.network.state_dict().items():
        assert torch.equal(v, b.network.state_dict()[k])
    assert (tmp_path / "wrapped.resolved_config.json").exists()


def test_inputs_are_not_modified(capsys, data_root, teacher_ckpt, tmp_path):
    before = {p: p.read_bytes() for p in data_root.rglob("*") if p.is_file()}
    run(capsys, "evaluate", "--checkpoint", teacher_ckpt, "--data-root", data_root)
    after = {p: p.read_bytes() for p in data_root.rglob("*") if p.is_file()}
    assert before == after
