import json
import subprocess
import sys

import numpy as np
import pytest

from rrpmatch.cli import EXIT_USAGE, format_table, main, output_path, parse_splits
from rrpmatch.dataset import save_sample
from rrpmatch.proximity import load_text, read_pgm, row_quality
from rrpmatch.rrp import default_workers

from conftest import paired_clones, separated


def write_fixture(sample, tmp_path, name):
    data = tmp_path / f"{name}.csv"
    schema = tmp_path / f"{name}_schema.json"
    save_sample(sample, data)
    schema.write_text(json.dumps(sample.schema.to_dict()))
    return ["--data", str(data), "--schema", str(schema)]


@pytest.fixture
def clone_args(tmp_path):
    return write_fixture(paired_clones(), tmp_path, "clones")


@pytest.fixture
def disjoint_args(tmp_path):
    return write_fixture(separated(), tmp_path, "disjoint")


def invoke(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestArguments:
    def test_split_below_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--data", "DW", "--splits", "1"])
        assert exc.value.code == EXIT_USAGE
        assert "at least 2" in capsys.readouterr().err

    @pytest.mark.parametrize("text,expected", [("50,32", (50, 32)), ("2", (2,))])
    def test_parse_splits(self, text, expected):
        assert parse_splits(text) == expected

    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == EXIT_USAGE

    def test_missing_file_is_an_error(self, capsys, tmp_path):
        code, _, err = invoke(capsys, "naive", "--data", tmp_path / "nope.csv")
        assert code == 1 and "error" in err

    def test_output_path(self, tmp_path):
        assert output_path("p.pgm", "treated", 8, True).name == "p.pgm"
        assert output_path("p.pgm", "treated", 8, False).name == "p_treated_8.pgm"
        assert output_path("p_{grow_on}-{split}.pgm", "controls", 2, False).name == \
            "p_controls-2.pgm"


class TestRun:
    ARGS = ("run", "--splits", "8,2", "--replications", "5", "--grow-on", "both")

    def test_table(self, capsys, clone_args):
        code, out, _ = invoke(capsys, *self.ARGS, *clone_args, "--seed", 1)
        lines = out.splitlines()
        assert code == 0 and len(lines) == 5
        assert lines[0].split()[:3] == ["grow_on", "split", "tau"]
        assert len({len(line) for line in lines}) <= 2  # aligned columns

    def test_repeatable_outputs(self, capsys, clone_args, tmp_path):
        outputs = []
        for k in range(2):
            d = tmp_path / f"r{k}"
            d.mkdir()
            code, out, _ = invoke(capsys, *self.ARGS, *clone_args, "--seed", 9,
                                  "--out-csv", d / "s.csv", "--out-json", d / "s.json",
                                  "--proximity-out", d / "p.pgm")
            assert code == 0
            files = sorted(d.iterdir())
            outputs.append((out, [(f.name, f.read_bytes()) for f in files]))
        assert outputs[0] == outputs[1]
        assert len(outputs[0][1]) == 2 + 4

    def test_entropy_seed_is_reported(self, capsys, clone_args):
        code, out, err = invoke(capsys, *self.ARGS, *clone_args)
        seed = int(err.split("seed:")[1].split()[0])
        code2, out2, err2 = invoke(capsys, *self.ARGS, *clone_args, "--seed", seed)
        assert out == out2 and "seed:" not in err2

    def test_json_document(self, capsys, clone_args, tmp_path):
        invoke(capsys, *self.ARGS, *clone_args, "--seed", 1, "--out-json", tmp_path / "s.json")
        doc = json.loads((tmp_path / "s.json").read_text())
        assert doc["version"] == 1 and doc["metadata"]["seed"] == 1
        assert [s["split"] for s in doc["summaries"]] == [8, 2, 8, 2]

    def test_csv_header(self, capsys, clone_args, tmp_path):
        invoke(capsys, *self.ARGS, *clone_args, "--seed", 1, "--out-csv", tmp_path / "s.csv")
        header = (tmp_path / "s.csv").read_text().splitlines()[0]
        assert header.startswith("dataset,grow_on,split,tau_hat,sigma_tau,tau_hat_adj")

    def test_all_failed_is_an_error(self, capsys, disjoint_args):
        code, _, err = invoke(capsys, "run", *disjoint_args, "--splits", "50",
                              "--replications", 3, "--max-iterations", 2, "--seed", 1)
        assert code == 1 and "none of 3 replications" in err


class TestDeterminismAcrossWorkers:
    def test_byte_identical(self, capsys, ll, tmp_path):
        results = []
        for threads in sorted({1, 2, default_workers()}):
            d = tmp_path / f"t{threads}"
            d.mkdir()
            invoke(capsys, "run", "--data", "LL", "--splits", "20,4", "--replications", 6,
                   "--seed", 77, "--threads", threads, "--out-csv", d / "s.csv",
                   "--out-json", d / "s.json", "--proximity-out", d / "p.pgm")
            results.append([(f.name, f.read_bytes()) for f in sorted(d.iterdir())])
        assert all(r == results[0] for r in results[1:])


class TestProximity:
    def test_all_zero_white_with_warning(self, capsys, disjoint_args, tmp_path):
        code, _, err = invoke(capsys, "proximity", *disjoint_args, "--splits", "50",
                              "--replications", 3, "--max-iterations", 2, "--seed", 1,
                              "--proximity-out", tmp_path / "z.pgm")
        assert code == 0
        assert (read_pgm(tmp_path / "z.pgm") == 255).all()
        assert "no matches" in err

    def test_rescale_identity(self, capsys, clone_args, tmp_path):
        common = ("proximity", *clone_args, "--splits", "4", "--replications", 5, "--seed", 2)
        invoke(capsys, *common, "--proximity-out", tmp_path / "a.pgm")
        invoke(capsys, *common, "--proximity-out", tmp_path / "b.pgm", "--rescale-width", 24)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_lalonde_sharpening(self, capsys, tmp_path):
        # trees grown on the controls: spurious matches thin out as the split falls
        code, out, _ = invoke(capsys, "proximity", "--data", "LL", "--grow-on", "controls",
                              "--splits", "50,16,2", "--replications", 20, "--seed", 4,
                              "--proximity-out", tmp_path / "p_{split}.pgm",
                              "--matrix-out", tmp_path / "p_{split}.txt")
        assert code == 0
        spread = []
        for split in (50, 16, 2):
            assert read_pgm(tmp_path / f"p_{split}.pgm").shape == (297, 425)
            q = row_quality(load_text(tmp_path / f"p_{split}.txt"))
            assert q.covered_fraction > 0.95
            spread.append(q.nonzero.mean())
        assert spread[0] > spread[1] > spread[2]


class TestProtocol:
    FAST = ("--initial-replications", 6, "--confirm-replications", 8, "--splits", "8,4,2",
            "--seed", 3)

    def test_matchable(self, capsys, clone_args, tmp_path):
        code, out, _ = invoke(capsys, "protocol", *clone_args, *self.FAST,
                              "--out-json", tmp_path / "v.json")
        assert code == 0 and out.startswith("verdict: Matchable")
        assert json.loads((tmp_path / "v.json").read_text())["exit_code"] == 0

    def test_not_matchable(self, capsys, disjoint_args):
        code, out, _ = invoke(capsys, "protocol", *disjoint_args, *self.FAST,
                              "--max-iterations", 2)
        assert code == 2 and out.startswith("verdict: NotMatchable")

    def test_ambiguous(self, capsys, clone_args):
        code, out, _ = invoke(capsys, "protocol", *clone_args, *self.FAST,
                              "--pct-high", 100.5, "--pct-low", 0)
        assert code == 3 and out.startswith("verdict: Ambiguous")

    def test_bad_thresholds(self, capsys, clone_args):
        code, _, err = invoke(capsys, "protocol", *clone_args, *self.FAST,
                              "--pct-high", 50, "--pct-low", 60)
        assert code == EXIT_USAGE and "pct_low" in err


class TestNaive:
    def test_dw(self, capsys, tmp_path):
        code, out, _ = invoke(capsys, "naive", "--data", "DW", "--out-json", tmp_path / "n.json")
        assert code == 0 and "1794.34" in out
        doc = json.loads((tmp_path / "n.json").read_text())
        assert round(doc["att"]) == 1794 and round(doc["se"]) == 671


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "rrpmatch.cli", "naive", "--data", "LL"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "886.30" in proc.stdout
