import io

import pytest

from iqcmhe import certio, cli


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def files(tmp_path_factory, cert, nominal_cert):
    d = tmp_path_factory.mktemp("cli")
    certio.save(cert, d / "cert.json")
    certio.save(nominal_cert, d / "nominal.json")
    return d


def test_usage_errors():
    assert run()[0] == cli.EXIT_USAGE
    assert run("frobnicate")[0] == cli.EXIT_USAGE
    assert run("horizon", "--bogus")[0] == cli.EXIT_USAGE
    assert run("horizon")[0] == cli.EXIT_USAGE
    assert run("horizon", "--cert", "/nonexistent/cert.json")[0] == cli.EXIT_USAGE
    assert run("verify", "--rho2", "1.5")[0] == cli.EXIT_USAGE
    assert run("verify", "--static-only", "--nominal")[0] == cli.EXIT_USAGE


def test_verify_infeasible_on_example(tmp_path):
    code, _, err = run("verify", "--out", str(tmp_path / "c.json"))
    assert code == cli.EXIT_INFEASIBLE and "infeasible" in err
    assert not (tmp_path / "c.json").exists()


def test_verify_and_horizon_on_retuned(tmp_path):
    path = tmp_path / "c.json"
    code, out, _ = run("verify", "--scenario", "example1-retuned", "--out", str(path))
    assert code == cli.EXIT_OK and path.exists() and out.startswith("margin ")
    code, out, _ = run("horizon", "--cert", str(path))
    assert code == cli.EXIT_OK
    assert out.splitlines()[0] == "N_min 22"


def test_config_file_and_flag_precedence(files, tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\neps = 50\n")
    _, from_file, _ = run("horizon", "--config", str(ini), "--cert", str(files / "cert.json"))
    _, from_flag, _ = run("horizon", "--config", str(ini), "--cert", str(files / "cert.json"), "--eps", "0.1")
    _, default, _ = run("horizon", "--cert", str(files / "cert.json"))
    assert from_flag == default
    assert from_file != default
    assert run("horizon", "--config", str(tmp_path / "missing.ini"))[0] == cli.EXIT_USAGE
    ini.write_text("[run]\neps = lots\n")
    assert run("horizon", "--config", str(ini), "--cert", str(files / "cert.json"))[0] == cli.EXIT_USAGE


def test_simulate_is_byte_identical(files, tmp_path):
    args = ["simulate", "--scenario", "example1-retuned", "--estimator", "standard",
            "--nominal-cert", str(files / "nominal.json"), "--steps", "6", "--seed", "3"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(*args, "--out", str(a), "--svg", str(tmp_path / "a.svg"))[0] == cli.EXIT_OK
    assert run(*args, "--out", str(b))[0] == cli.EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.svg").read_text().startswith("<svg")


def test_simulate_proposed_needs_robust_certificate(files, tmp_path):
    code, _, _ = run("simulate", "--scenario", "example1-retuned", "--cert", str(files / "nominal.json"),
                     "--steps", "3", "--out", str(tmp_path / "t.csv"))
    assert code == cli.EXIT_USAGE


def test_compare_writes_summary(files, tmp_path):
    out = tmp_path / "s.csv"
    code, text, _ = run("compare", "--scenario", "example1-retuned", "--cert", str(files / "cert.json"),
                        "--nominal-cert", str(files / "nominal.json"), "--steps", "3", "--seeds", "0:2",
                        "--out", str(out))
    assert code == cli.EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "seed,est,mean_err_tail,mean_state_tail" and len(lines) == 5
    assert "proposed" in text and "standard" in text
    assert run("compare", "--seeds", "x:y", "--cert", str(files / "cert.json"),
               "--nominal-cert", str(files / "nominal.json"))[0] == cli.EXIT_USAGE


def test_iqc_check(files):
    code, out, _ = run("iqc-check", "--scenario", "example1-retuned", "--cert", str(files / "cert.json"),
                       "--samples", "20", "--length", "10")
    assert code == cli.EXIT_OK
    value = float(out.split()[3])
    assert value >= -1e-9
