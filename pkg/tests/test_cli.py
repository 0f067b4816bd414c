import csv
import io
import json

import pytest

from finalbn import synthetic_splits
from finalbn.cli import main
from finalbn.data import load_external, save_dataset

from conftest import TINY_HYPER, TINY_PROTOCOL


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--protocol", "default", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    for name, split in zip(("train", "val", "test"), synthetic_splits(TINY_PROTOCOL, seed=0)):
        save_dataset(split, out / f"{name}.fnd")
    return out


def manifest(path, **extra):
    body = {"protocol": TINY_PROTOCOL.to_dict(), "repeats": 2, "base_seed": 3,
            "hyper": TINY_HYPER.to_dict(), "configs": [0, 16, 32], **extra}
    path.write_text(json.dumps(body))
    return path


class TestGenData:
    def test_default_protocol(self, default_data):
        counts = {name: load_external(default_data / f"{name}.fnd").class_counts() for name in ("train", "val", "test")}
        assert counts == {"train": (1000, 10), "val": (150, 7), "test": (150, 150)}
        lines = (default_data / "train.fnd").read_text().splitlines()
        assert lines[0] == "FND1,16,16,1010" and len(lines) == 1011

    def test_splits_disjoint_by_id(self, default_data):
        ids = json.loads((default_data / "splits.json").read_text())["ids"]
        sets = [set(ids[n]) for n in ("train", "val", "test")]
        assert [len(s) for s in sets] == [1010, 157, 300]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])

    def test_zero_counts_give_header_only(self, tmp_path, capsys):
        code, _, _ = run(["gen-data", "--majority", 0, "--minority", 0, "--out", tmp_path], capsys)
        assert code == 0
        for name in ("pool_majority.fnd", "pool_minority.fnd"):
            assert (tmp_path / name).read_text() == "FND1,16,16,0\n"

    def test_byte_identical_reruns(self, tmp_path, capsys):
        for sub in ("a", "b"):
            run(["gen-data", "--majority", 6, "--minority", 3, "--seed", 2, "--out", tmp_path / sub], capsys)
        for name in ("pool_majority.fnd", "pool_minority.fnd"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_from_environment(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("FN_SEED", "2")
        run(["gen-data", "--majority", 6, "--minority", 3, "--out", tmp_path / "env"], capsys)
        monkeypatch.delenv("FN_SEED")
        run(["gen-data", "--majority", 6, "--minority", 3, "--seed", 2, "--out", tmp_path / "flag"], capsys)
        assert (tmp_path / "env" / "pool_minority.fnd").read_bytes() == (tmp_path / "flag" / "pool_minority.fnd").read_bytes()

    def test_echoes_resolved_config(self, tmp_path, capsys):
        _, out, _ = run(["gen-data", "--majority", 1, "--minority", 1, "--out", tmp_path], capsys)
        echoed = json.loads(out.splitlines()[0])
        assert echoed["seed"] == 0 and echoed["lesion_amplitude"] == 0.3

    def test_negative_counts(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--majority", "-1", "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestTrain:
    def test_zero_epochs(self, tiny_data, tmp_path, capsys):
        code, _, _ = run(["train", "--data", tiny_data, "--flags", "bn", "--epochs", 0, "--out", tmp_path], capsys)
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["epochs"] == [] and report["config"]["config_id"] == 32
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 1
        assert (tmp_path / "model.fnbn").read_bytes()[:8] == b"FNBN0001"

    def test_flags_map_to_config(self, tiny_data, tmp_path, capsys):
        _, out, _ = run(["train", "--data", tiny_data, "--flags", "bn,wd", "--epochs", 0, "--out", tmp_path], capsys)
        assert json.loads(out.splitlines()[0])["config"]["config_id"] == 33

    def test_missing_data_dir(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert exc.value.code == 2
        assert str(tmp_path / "nope") in capsys.readouterr().err

    def test_unknown_flag(self, tiny_data, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(tiny_data), "--flags", "bn,zz", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_run_failure_exits_one(self, tiny_data, tmp_path, capsys):
        with pytest.warns(RuntimeWarning):
            code, _, err = run(["train", "--data", tiny_data, "--lr", "1e300", "--schedule", "constant",
                                "--epochs", 1, "--out", tmp_path], capsys)
        assert code == 1 and "epoch 1, batch" in err

    def test_echoed_config_reproduces_run(self, tiny_data, tmp_path, capsys):
        argv = ["train", "--data", tiny_data, "--flags", "bn,mx,da", "--epochs", 2, "--batch-size", 16,
                "--hidden-size", 8, "--seed", 5, "--out", tmp_path / "first"]
        _, out, _ = run(argv, capsys)
        (tmp_path / "resolved.json").write_text(out.splitlines()[0])
        code, _, _ = run(["train", "--data", tiny_data, "--config", tmp_path / "resolved.json",
                          "--out", tmp_path / "second"], capsys)
        assert code == 0
        for name in ("metrics.csv", "trace.csv", "reliability.csv", "report.json", "model.fnbn"):
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


class TestGrid:
    def test_refuses_existing_output(self, tmp_path, capsys):
        m = manifest(tmp_path / "m.json", configs=[32], repeats=1)
        out = tmp_path / "out"
        assert run(["grid", "--manifest", m, "--out", out], capsys)[0] == 0
        code, _, err = run(["grid", "--manifest", m, "--out", out], capsys)
        assert code == 2 and "--force" in err
        assert run(["grid", "--manifest", m, "--out", out, "--force"], capsys)[0] == 0

    def test_worker_count_gives_identical_files(self, tmp_path, capsys):
        m = manifest(tmp_path / "m.json")
        code1, out1, _ = run(["grid", "--manifest", m, "--out", tmp_path / "w1", "--workers", 1], capsys)
        code2, _, _ = run(["grid", "--manifest", m, "--out", tmp_path / "w2", "--workers", 2], capsys)
        assert code1 == code2 == 0
        s1 = (tmp_path / "w1" / "summary.json").read_bytes()
        assert s1 == (tmp_path / "w2" / "summary.json").read_bytes()
        assert len(json.loads(s1)["configs"]) == 3
        files = sorted(p.relative_to(tmp_path / "w1") for p in (tmp_path / "w1").rglob("*.csv"))
        assert len(files) == 3 * 2 * 3 + 1
        for rel in files:
            assert (tmp_path / "w1" / rel).read_bytes() == (tmp_path / "w2" / rel).read_bytes()
        assert "group" in out1 and "✓" in out1

    def test_unknown_manifest_key(self, tmp_path, capsys):
        m = manifest(tmp_path / "m.json", colour="blue")
        with pytest.raises(SystemExit) as exc:
            main(["grid", "--manifest", str(m), "--out", str(tmp_path / "o")])
        assert exc.value.code == 2

    def test_all_cells_failing_exits_one(self, tmp_path, capsys):
        hyper = {**TINY_HYPER.to_dict(), "base_lr": 1e300, "schedule": "constant"}
        m = manifest(tmp_path / "m.json", configs=[0], repeats=1, hyper=hyper)
        with pytest.warns(RuntimeWarning):
            code, _, err = run(["grid", "--manifest", m, "--out", tmp_path / "o"], capsys)
        assert code == 1 and "failed: config 0 repeat 0" in err

    def test_external_data(self, tiny_data, tmp_path, capsys):
        m = manifest(tmp_path / "m.json", configs=[32], repeats=1, data=str(tiny_data), dataset="tiny")
        assert run(["grid", "--manifest", m, "--out", tmp_path / "o"], capsys)[0] == 0
        assert json.loads((tmp_path / "o" / "summary.json").read_text())["dataset"] == "tiny"


@pytest.fixture(scope="module")
def grid_out(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    m = manifest(root / "m.json")
    assert main(["grid", "--manifest", str(m), "--out", str(root / "out")]) == 0
    return root / "out"


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestReport:
    def test_best_worst(self, grid_out, capsys):
        code, out, _ = run(["report", "--in", grid_out, "--table", "best-worst", "--k", 1], capsys)
        rows = read_csv(out)
        assert code == 0 and len(rows) == 2
        assert [r["group"] for r in rows] == ["best", "worst"]

    def test_three_plants(self, grid_out, capsys):
        code, out, _ = run(["report", "--in", grid_out, "--in", grid_out, "--table", "three-plants"], capsys)
        rows = read_csv(out)
        assert code == 0 and len(rows) == 4
        for r in rows:
            diff = float(r["with_final_bn_no_wl"]) - float(r["with_wl_no_bn"])
            assert float(r["bn_total_improvement"]) == pytest.approx(diff, abs=1e-12)

    def test_confident_wrongs(self, grid_out, capsys):
        code, out, _ = run(["report", "--in", grid_out, "--table", "confident-wrongs", "--pair", "0,32"], capsys)
        rows = read_csv(out)
        assert code == 0 and len(rows) == TINY_PROTOCOL.test_counts[1]
        p = [float(r["p_class1_config0"]) for r in rows]
        assert p == sorted(p)
        assert set(rows[0]) == {"sample_index", "p_class1_config0", "p_class1_config32"}

    def test_unknown_table(self, grid_out, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["report", "--in", str(grid_out), "--table", "pie"])
        assert exc.value.code == 2
        assert "three-plants" in capsys.readouterr().err

    @pytest.mark.parametrize("table", ["best-worst", "three-plants", "confident-wrongs"])
    def test_empty_dir(self, tmp_path, capsys, table):
        code, _, err = run(["report", "--in", tmp_path, "--table", table], capsys)
        assert code == 1 and "no runs found" in err
