import csv
import json
import os
import subprocess
import sys

import pytest

from membrane_lab.cli import EXIT_ERROR, EXIT_FLAGGED, EXIT_OK, load_config, main
from membrane_lab.errors import ConfigError

SMALL_SAMPLER = {"n_chains": 4, "burn_in": 200, "n_keep": 4000}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_unknown_key_reports_line(self, tmp_path):
        path = write(tmp_path, {"d": 2, "L": 4, "sampler": {"n_chain": 3}})
        with pytest.raises(ConfigError, match=r"cfg\.json:\d+: sampler\.n_chain"):
            load_config(path, "sample")

    def test_syntax_error_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "d": 2,\n  "L": 4,,\n}')
        with pytest.raises(ConfigError, match=r"bad\.json:3:\d+: invalid JSON"):
            load_config(str(path), "sample")

    def test_wrong_types_and_missing(self, tmp_path):
        with pytest.raises(ConfigError, match="'L' or 'Ls'"):
            load_config(write(tmp_path, {"d": 2}), "cgf")
        with pytest.raises(ConfigError, match="d"):
            load_config(write(tmp_path, {"d": "2", "L": 3}), "cgf")

    def test_subcommand_mismatch(self, tmp_path):
        with pytest.raises(ConfigError, match="not 'cgf'"):
            load_config(write(tmp_path, {"subcommand": "sample", "d": 2, "L": 3}), "cgf")


class TestRuns:
    def test_profile(self, tmp_path):
        out = tmp_path / "out"
        code = main(["profile", "--config", write(tmp_path, {"d": 2, "L": 8, "x0": [1, 2]}),
                     "--out", str(out)])
        assert code == EXIT_OK
        rows = read_csv(out / "profile.csv")
        assert len(rows) == 4 * 17
        assert max(abs(float(r["inner_product_residual"])) for r in rows) < 1e-9
        man = json.loads((out / "manifest.json").read_text())
        for key in ("subcommand", "config", "seed", "versions", "summary", "exit_status",
                    "wall_time_s", "timestamp", "outputs"):
            assert key in man
        assert man["outputs"] == ["profile.csv"]

    def test_cgf_quadratic(self, tmp_path):
        cfg = {"d": 2, "L": 3, "seed": 4, "n_nodes": 4, "sampler": SMALL_SAMPLER, "amplitude": 0.5}
        out = tmp_path / "out"
        assert main(["cgf", "--config", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
        row = [r for r in read_csv(out / "report.csv") if r["check_name"] == "cgf"][0]
        assert abs(float(row["gap"])) <= 3.5 * float(row["se"])

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write(tmp_path, {"d": 2, "L": 2, "sampler": {"n_keep": 200, "burn_in": 20}})
        for name in ("a", "b"):
            # a short run is flagged for low effective sample size (exit 2)
            assert main(["sample", "--config", cfg, "--out", str(tmp_path / name), "--seed", "9"]) == EXIT_FLAGGED
        for f in ("diagnostics.csv", "samples.mlarray"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_greens_and_bergman(self, tmp_path):
        cfg = write(tmp_path, {"d": 2, "L": 4})
        for sub in ("greens", "bergman"):
            assert main([sub, "--config", cfg, "--out", str(tmp_path / sub)]) == EXIT_OK
            assert (tmp_path / sub / "report.csv").exists()

    def test_malformed_config_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["cgf", "--config", write(tmp_path, {"d": 2, "L": 3, "bogus": 1}), "--out", str(out)])
        assert code == EXIT_ERROR
        assert "bogus" in capsys.readouterr().err
        assert not out.exists()

    def test_missing_config(self, tmp_path):
        assert main(["cgf", "--config", str(tmp_path / "nope.json")]) == EXIT_ERROR

    def test_console_script(self, tmp_path):
        cfg = write(tmp_path, {"d": 1, "L": 3})
        proc = subprocess.run([sys.executable, "-m", "membrane_lab.cli", "profile", "--config", cfg,
                               "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert os.path.exists(tmp_path / "o" / "profile.csv")
