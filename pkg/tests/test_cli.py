"""
End-to-end tests of the batch runner: exit codes, config layering,
artifacts and the manifest
"""
import json

import pytest

import carpet_lab
from core.exceptions import ParameterDomainError
from core.models import Subcommand
from pipeline import commands
from pipeline.exports import MANIFEST_NAME, sha256_file


def _manifest(path):
    return json.loads((path / MANIFEST_NAME).read_text(encoding="utf-8"))


def test_params_run_passes(tmp_path):
    code = carpet_lab.main(["params", "--kappa", "4", "--output-dir", str(tmp_path)])
    assert code == carpet_lab.EXIT_OK
    manifest = _manifest(tmp_path)
    assert manifest["passed"]
    assert manifest["params"]["d_carpet"] == pytest.approx(1.875)
    assert manifest["assertions"]["covariance_identity"]
    assert manifest["checksums"]["params.csv"] == sha256_file(tmp_path / "params.csv")
    # the default kappa list includes 2, which has no carpet parameters
    assert any("kappa=2" in w for w in manifest["warnings"])


def test_params_artifacts_are_reproducible(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        assert carpet_lab.main(["params", "--kappa", "3", "--seed", "5", "--output-dir", str(out)]) == 0
    assert _manifest(first)["checksums"] == _manifest(second)["checksums"]


def test_no_csv_flag(tmp_path):
    assert carpet_lab.main(["params", "--kappa", "3", "--no-csv", "--output-dir", str(tmp_path)]) == 0
    assert not (tmp_path / "params.csv").exists()
    assert (tmp_path / "params.json").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["params", "--kappa", "9"],
    ["params", "--kappa", "2"],
    ["params", "--seed", "-1"],
    ["params", "--scale", "3"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert carpet_lab.main(argv + ["--output-dir", str(tmp_path)]) == carpet_lab.EXIT_CONFIG


def test_config_file_and_flag_precedence(tmp_path):
    config = tmp_path / "run.json"
    out = tmp_path / "out"
    config.write_text(json.dumps({"subcommand": "params", "kappa": 3.0, "output_dir": str(out)}))
    assert carpet_lab.main(["--config", str(config), "--kappa", "5"]) == 0
    assert _manifest(out)["config"]["kappa"] == 5.0


def test_bad_config_files(tmp_path):
    missing = tmp_path / "missing.json"
    assert carpet_lab.main(["params", "--config", str(missing)]) == carpet_lab.EXIT_CONFIG
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"subcommand": "params", "colour": "red"}))
    assert carpet_lab.main(["--config", str(unknown)]) == carpet_lab.EXIT_CONFIG
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert carpet_lab.main(["--config", str(broken)]) == carpet_lab.EXIT_CONFIG


def test_manifest_schema(capsys):
    assert carpet_lab.main(["--print-manifest-schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert "wall_clock_seconds" in schema["properties"]
    assert "passed" in schema["required"]


def test_sle_trace_run(tmp_path):
    code = carpet_lab.main(["sle-trace", "--kappa", "6", "--n-steps", "200", "--dt", "0.001",
                            "--seed", "1", "2", "--svg", "--output-dir", str(tmp_path)])
    assert code == 0
    for name in ("driver_seed1.csv", "trace_seed2.csv", "trace_seed1.svg", "loewner_exactness.json"):
        assert (tmp_path / name).exists()
    manifest = _manifest(tmp_path)
    assert manifest["assertions"] == {"forward_map_exact": True, "swallow_time_exact": True}
    assert [t["stage"] for t in manifest["stage_timings"]][-1] == "loewner exactness"


def test_ode_check_run(tmp_path):
    assert carpet_lab.main(["ode-check", "--kappa", "6", "--output-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "ode_check.json").read_text())
    assert report["max_residual"] < 1e-10


# ============================================================
# DOMAIN ERRORS BEFORE AND AFTER ARTIFACTS
# ============================================================

def test_domain_error_before_any_artifact_exits_2(tmp_path, monkeypatch):
    def refuse(config, writer, clock):
        raise ParameterDomainError("kappa", config.kappa, "(0, 1)")

    monkeypatch.setitem(commands.COMMANDS, Subcommand.PARAMS, refuse)
    assert carpet_lab.main(["params", "--kappa", "3", "--output-dir", str(tmp_path)]) == carpet_lab.EXIT_CONFIG


def test_domain_error_after_an_artifact_exits_4(tmp_path, monkeypatch):
    def break_midway(config, writer, clock):
        writer.json("partial.json", {"stage": 1})
        raise ParameterDomainError("kappa", config.kappa, "(0, 1)")

    monkeypatch.setitem(commands.COMMANDS, Subcommand.PARAMS, break_midway)
    assert carpet_lab.main(["params", "--kappa", "3", "--output-dir", str(tmp_path)]) == carpet_lab.EXIT_INTERNAL
    assert (tmp_path / "partial.json").exists()
    assert not (tmp_path / MANIFEST_NAME).exists()


# ============================================================
# SMALL END-TO-END RUNS
# ============================================================

def test_carpet_run(tmp_path):
    code = carpet_lab.main(["carpet", "--kappa", "3", "--grid-size", "64", "--t-cap", "0.05", "--seed", "3",
                            "--output-dir", str(tmp_path)])
    assert code in (carpet_lab.EXIT_OK, carpet_lab.EXIT_FAILED)
    for name in ("carpet.pgm", "cle_loops.csv", "carpet.json"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "carpet.pgm").read_bytes().startswith(b"P5")
    manifest = _manifest(tmp_path)
    assert "carpet_dimension" in manifest["assertions"]
    assert manifest["checksums"]["carpet.json"] == sha256_file(tmp_path / "carpet.json")


def test_stable_scaling_run(tmp_path):
    code = carpet_lab.main(["stable-scaling", "--kappa", "6", "--n-replicas", "4", "--seed", "2",
                            "--output-dir", str(tmp_path)])
    assert code in (carpet_lab.EXIT_OK, carpet_lab.EXIT_FAILED)
    assert (tmp_path / "stable_scaling.csv").exists()
    report = json.loads((tmp_path / "stable_scaling.json").read_text())
    assert report["alpha_hat"] == pytest.approx(1.5)
    assert _manifest(tmp_path)["assertions"]["shift_identity"]


def test_bessel_check_run(tmp_path):
    code = carpet_lab.main(["bessel-check", "--kappa", "6", "--seed", "4", "--output-dir", str(tmp_path)])
    assert code in (carpet_lab.EXIT_OK, carpet_lab.EXIT_FAILED)
    assert (tmp_path / "bessel_endpoints.csv").exists()
    report = json.loads((tmp_path / "bessel_check.json").read_text())
    assert report["a"] == pytest.approx(1.0 / 3.0)
    assertions = _manifest(tmp_path)["assertions"]
    assert assertions["density_normalized"]
    assert assertions["chapman_kolmogorov"]


def test_cle4_coupling_run(tmp_path):
    code = carpet_lab.main(["cle4-coupling", "--grid-size", "32", "--n-fields", "1", "--t-cap", "0.05",
                            "--eps", "1e-6", "--c-sequence", "0.5", "1.0", "--seed", "1",
                            "--output-dir", str(tmp_path)])
    assert code in (carpet_lab.EXIT_OK, carpet_lab.EXIT_FAILED)
    assert (tmp_path / "coupling.csv").exists()
    assert (tmp_path / "carpet_c0.5000.pgm").exists()
    assert (tmp_path / "carpet_c1.0000.pgm").exists()
    # thinning only removes loops, so the carpets nest
    assert _manifest(tmp_path)["assertions"]["carpet_nesting"]


@pytest.mark.slow
def test_carpet_run_at_full_resolution(tmp_path):
    code = carpet_lab.main(["carpet", "--kappa", "4", "--grid-size", "512", "--seed", "0",
                            "--output-dir", str(tmp_path)])
    assert code in (carpet_lab.EXIT_OK, carpet_lab.EXIT_FAILED)
    assert "carpet_dimension" in _manifest(tmp_path)["assertions"]
