import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import write_triples
from kgtsvd.cli import (
    EXIT_INVALID_CONFIG,
    EXIT_MISSING_FILE,
    EXIT_USAGE,
    InvalidConfigError,
    block_tensor,
    main,
    read_config_file,
    resolve_config,
)

TINY_TRAIN = ["a\tr\tb", "b\tr\tc", "c\tr\td", "d\tr\te", "a\tq\tc", "b\tq\td", "c\tq\te", "e\tr\ta"]
TINY_VALID = ["a\tr\tc"]
TINY_TEST = ["b\tq\tc", "d\tr\ta"]
FAST_TRAIN = ["--rank", "2", "--epochs", "5", "--batch-size", "4", "--neg-ratio", "1"]


def run(argv, tmp_path, name="out.jsonl"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    records = [json.loads(line) for line in out.read_text().splitlines()] if out.exists() else []
    return code, records


def by_kind(records, kind):
    return [r for r in records if r["record"] == kind]


@pytest.fixture
def tiny_dir(tmp_path):
    d = tmp_path / "tiny"
    d.mkdir()
    write_triples(d / "train.txt", TINY_TRAIN)
    write_triples(d / "valid.txt", TINY_VALID)
    write_triples(d / "test.txt", TINY_TEST)
    return d


class TestConfig:
    def test_precedence(self):
        cfg = resolve_config("qsim-verify", {"dim": "3", "pairs": None}, {"dim": "5", "pairs": "7"})
        assert cfg["dim"] == 3 and cfg["pairs"] == 7 and cfg["matrices"] == 10

    def test_file_parsing(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\ndim = 6  # trailing\n\nn-steps=2\n")
        assert read_config_file(path) == {"dim": "6", "n_steps": "2"}

    def test_bad_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("just words\n")
        with pytest.raises(InvalidConfigError):
            read_config_file(path)

    def test_unknown_key(self):
        with pytest.raises(InvalidConfigError):
            resolve_config("qsim-verify", {}, {"colour": "red"})

    def test_bad_value(self):
        with pytest.raises(InvalidConfigError):
            resolve_config("qsim-verify", {"dim": "four"}, {})


class TestExitCodes:
    def test_unknown_flag(self, tmp_path):
        assert main(["bound-table", "--no-such-flag", "1"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["launch"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["bound-table", "--config", str(tmp_path / "nope.cfg")]) == EXIT_MISSING_FILE

    def test_missing_model(self, tmp_path):
        code, _ = run(["eval", "--model", str(tmp_path / "missing.bin")], tmp_path)
        assert code == EXIT_MISSING_FILE

    def test_invalid_config(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("resolution = tiny\n")
        assert main(["bound-table", "--config", str(cfg)]) == EXIT_INVALID_CONFIG

    def test_invalid_task(self, tmp_path, tiny_dir):
        code, _ = run(["train", "--dataset", str(tiny_dir), *FAST_TRAIN, "--model-out", str(tmp_path / "m.bin")],
                      tmp_path, "t.jsonl")
        assert code == 0
        code, _ = run(["eval", "--model", str(tmp_path / "m.bin"), "--dataset", str(tiny_dir), "--task", "spo"],
                      tmp_path)
        assert code == EXIT_INVALID_CONFIG

    def test_distinct(self):
        assert len({EXIT_USAGE, EXIT_MISSING_FILE, EXIT_INVALID_CONFIG, 1}) == 4

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "kgtsvd.cli", "bound-table", "--grid", "-3"],
                             capture_output=True, text=True, check=True)
        rows = [json.loads(line) for line in res.stdout.splitlines()]
        assert rows[0]["record"] == "manifest"


class TestBoundTable:
    def test_default_grid_row(self, tmp_path):
        code, records = run(["bound-table", "--text", "1"], tmp_path)
        assert code == 0
        assert records[0]["record"] == "manifest"
        rows = {r["x"]: r["p_min"] for r in by_kind(records, "min_p")}
        assert len(rows) == 20
        assert rows[-3.0] == pytest.approx(0.2196, abs=2e-4)
        assert "0.2196" in by_kind(records, "table_text")[0]["text"]

    def test_regular_grid(self, tmp_path):
        _, records = run(["bound-table", "--x-min", "-4", "--x-max", "-2", "--step", "0.5"], tmp_path)
        assert [r["x"] for r in by_kind(records, "min_p")] == [-4.0, -3.5, -3.0, -2.5, -2.0]


class TestQsim:
    def test_one_triple(self, tmp_path):
        code, records = run(["qsim", "--triples", "0,1,2", "--dims", "2,2,3", "--shots", "50"], tmp_path)
        assert code == 0
        sample = by_kind(records, "sample")[0]
        assert sample["histogram"] == {"1,2": 50}
        assert sample["success_probability"] == pytest.approx(1.0)

    def test_tensor_file(self, tmp_path):
        a = np.zeros((2, 2, 2))
        a[0, 0, 1] = a[1, 1, 0] = 1
        np.save(tmp_path / "a.npy", a)
        code, records = run(["qsim", "--tensor", str(tmp_path / "a.npy"), "--shots", "20"], tmp_path)
        assert code == 0
        assert by_kind(records, "sample")[0]["histogram"] == {"0,1": 20}

    def test_needs_input(self, tmp_path):
        code, _ = run(["qsim"], tmp_path)
        assert code == EXIT_INVALID_CONFIG

    def test_verify(self, tmp_path):
        code, records = run(["qsim-verify", "--pairs", "3", "--matrices", "2", "--dim", "3"], tmp_path)
        assert code == 0
        summary = by_kind(records, "summary")[0]
        assert summary["ratios_in_range"] and summary["errors_decrease"]
        assert len(by_kind(records, "swap_step")) == 3


class TestSparsifyVerify:
    def test_small_block(self, tmp_path):
        code, records = run(["sparsify-verify", "--block", "4", "--trials", "3"], tmp_path)
        assert code == 0
        bounds = by_kind(records, "bounds")[0]
        assert bounds["p_min_thm1"] > 1
        assert by_kind(records, "skipped")


class TestTrainEval:
    def test_ingest_dir(self, tmp_path, tiny_dir):
        code, records = run(["ingest", str(tiny_dir)], tmp_path)
        assert code == 0
        stats = by_kind(records, "stats")[0]
        assert stats["n_entities"] == 5 and stats["n_train"] == 8

    def test_ingest_files(self, tmp_path, tiny_dir):
        code, records = run(["ingest", str(tiny_dir / "train.txt"), str(tiny_dir / "test.txt")], tmp_path)
        assert code == 0
        assert by_kind(records, "vocab")[0] == {"record": "vocab", "entities": 5, "predicates": 2}

    def test_train_then_eval(self, tmp_path, tiny_dir):
        model = tmp_path / "m.bin"
        code, records = run(["train", "--dataset", str(tiny_dir), *FAST_TRAIN, "--model-out", str(model)],
                            tmp_path, "t.jsonl")
        assert code == 0
        assert [r["epoch"] for r in by_kind(records, "epoch")] == [1, 2, 3, 4, 5]
        assert by_kind(records, "model")[0]["rank"] == 2
        for task in ("object", "po"):
            code, records = run(["eval", "--model", str(model), "--dataset", str(tiny_dir), "--task", task],
                                tmp_path, f"{task}.jsonl")
            assert code == 0
            assert by_kind(records, "metrics")[0]["n_queries"] == 2

    def test_distmult(self, tmp_path, tiny_dir):
        code, records = run(["train", "--dataset", str(tiny_dir), *FAST_TRAIN, "--model-type", "distmult",
                             "--model-out", str(tmp_path / "d.bin")], tmp_path)
        assert code == 0
        assert by_kind(records, "model")[0]["model_type"] == "distmult"

    def test_sweep_p(self, tmp_path, tiny_dir):
        code, records = run(["sweep-p", "--dataset", str(tiny_dir), *FAST_TRAIN, "--p-values", "0.5,1,2"],
                            tmp_path)
        assert code == 0
        metrics = by_kind(records, "metrics")
        assert [m["p"] for m in metrics] == [0.5, 1.0, 2.0]
        assert [m["sampling"] for m in metrics] == [True, True, False]


class TestReplay:
    @pytest.mark.parametrize("argv", [
        ["bound-table", "--grid=-3,-1", "--seed", "4"],
        ["qsim", "--triples", "0,0,1;1,1,0;0,1,1", "--dims", "2,2,2", "--tau", "0.5", "--seed", "9"],
        ["qsim-verify", "--pairs", "2", "--matrices", "1", "--dim", "2", "--seed", "3"],
    ])
    def test_bit_identical(self, tmp_path, argv):
        first = tmp_path / "first.jsonl"
        assert main([*argv, "--out", str(first)]) == 0
        second = tmp_path / "second.jsonl"
        assert main(["replay", str(first), "--out", str(second)]) == 0
        a, b = first.read_text().splitlines(), second.read_text().splitlines()
        assert a[1:] == b[1:]
        ma, mb = json.loads(a[0]), json.loads(b[0])
        ma.pop("started"), mb.pop("started")
        assert ma == mb

    def test_train_replay(self, tmp_path, tiny_dir):
        first = tmp_path / "first.jsonl"
        argv = ["train", "--dataset", str(tiny_dir), *FAST_TRAIN, "--model-out", str(tmp_path / "m.bin")]
        assert main([*argv, "--out", str(first)]) == 0
        blob = (tmp_path / "m.bin").read_bytes()
        second = tmp_path / "second.jsonl"
        assert main(["replay", str(first), "--out", str(second)]) == 0
        assert first.read_text().splitlines()[1:] == second.read_text().splitlines()[1:]
        assert (tmp_path / "m.bin").read_bytes() == blob

    def test_not_a_manifest(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"record": "min_p"}\n')
        assert main(["replay", str(bad)]) == EXIT_INVALID_CONFIG


def test_block_tensor():
    a = block_tensor(2, 3)
    assert a.shape == (6, 6, 6)
    assert a.sum() == 24
    assert a[0, 1, 1] == 1 and a[0, 2, 2] == 0
