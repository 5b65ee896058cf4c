import csv
import hashlib
import json

import pytest

from delaysmooth.catalog import Catalog
from delaysmooth.cli import list_catalog, main, run, shipped_configs
from delaysmooth.config import load_config
from delaysmooth.functionals import PhiBar

FAST = ["s1_covariance", "s2_smoothing_rate", "s3_smoothing_rate", "s2_gradient_rate",
        "s1_feller_probe", "s2_simulate", "s2_linear_solve"]
SLOW = ["s1_hjb_solve", "s2_hjb_solve", "s1_control"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_every_experiment_has_a_shipped_config():
    kinds = {load_config(p).experiment for p in shipped_configs().values()}
    assert kinds == {"simulate", "covariance", "smoothing-rate", "gradient-rate", "feller-probe",
                     "hjb-solve", "linear-solve", "control"}
    assert sorted(FAST + SLOW) == sorted(shipped_configs())


@pytest.mark.parametrize("name", FAST)
def test_shipped_config_runs(name, tmp_path):
    assert main([name, "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["result"] == "PASS"


@pytest.mark.slow
@pytest.mark.parametrize("name", SLOW)
def test_shipped_solver_config_runs(name, tmp_path):
    assert main([name, "--out", str(tmp_path)]) == 0


def test_covariance_reference(tmp_path):
    assert main(["--config", str(shipped_configs()["s1_covariance"]), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "covariance.csv")
    assert [float(r["t"]) for r in rows] == [0.1, 0.5, 0.9]
    for r in rows:
        assert abs(float(r["q_00"]) - float(r["t"])) <= 1e-10 * float(r["t"])


def test_smoothing_rate_slope(tmp_path):
    assert main(["s2_smoothing_rate", "--out", str(tmp_path)]) == 0
    slope = json.loads((tmp_path / "summary.json").read_text())["slope"]
    assert 0.9 <= slope <= 1.1


def test_atom_at_zero_is_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("experiment: covariance\n"
                   "system: {n: 1, d: 1.0, a0: -1.0, a1: {atoms: [[0.0, 0.5]]}}\n"
                   "times: [0.1]\n")
    assert run(cfg, tmp_path / "out") == 2
    assert "standing condition" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_unknown_experiment(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("experiment: sing\nsystem: S1\n")
    assert run(cfg, tmp_path / "out") == 2
    assert "unknown experiment" in capsys.readouterr().err


def test_non_integer_seed_and_bad_yaml(tmp_path):
    a = tmp_path / "a.yaml"
    a.write_text("experiment: simulate\nsystem: S1\nseed: 1.5\n")
    b = tmp_path / "b.yaml"
    b.write_text("experiment: [unclosed\n")
    assert run(a, tmp_path / "o") == 2
    assert run(b, tmp_path / "o") == 2


def test_unknown_catalog_name(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment: covariance\nsystem: S9\ntimes: [0.1]\n")
    assert run(cfg, tmp_path / "o") == 2
    assert "S9" in capsys.readouterr().err


def test_failed_check_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment: smoothing-rate\nsystem: S2\ntimes: {geom: [0.001, 0.1, 6]}\n"
                   "expect_slope: [2.8, 3.2]\n")
    assert run(cfg, tmp_path / "o") == 3
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["result"] == "FAIL"


def test_listing(capsys):
    assert main(["--list"]) == 0
    lines = capsys.readouterr().out.splitlines()
    for name in ("S1", "S2", "S3"):
        assert f"systems: {name}" in lines
    assert "problems: S1_quadratic" in lines
    assert list_catalog() == list_catalog()


def test_registered_observable_is_listed(capsys):
    cat = Catalog.default()
    cat.register("observables", "my_step", lambda: PhiBar("my_step", lambda y: (y[..., 0] > 1.0) * 1.0,
                                                           "bounded", 1.0))
    assert "observables: my_step" in list_catalog(cat)
    assert main(["--list"], catalog=cat) == 0
    assert "observables: my_step" in capsys.readouterr().out


def test_empty_catalog_lists_nothing(capsys):
    assert list_catalog(Catalog.empty()) == []
    assert main(["--list"], catalog=Catalog.empty()) == 0
    assert capsys.readouterr().out == ""


@pytest.mark.parametrize("name", ["s2_simulate", "s2_linear_solve"])
def test_thread_count_does_not_change_bytes(name, tmp_path):
    digests = []
    for k in (1, 2, 3):
        out = tmp_path / f"k{k}"
        assert main([name, "--out", str(out), "--threads", str(k)]) == 0
        digests.append({p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                        for p in sorted(out.glob("*.csv"))})
    assert digests[0] and digests[0] == digests[1] == digests[2]


def test_summary_embeds_config_hash(tmp_path):
    path = shipped_configs()["s1_covariance"]
    assert main([str(path), "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    assert summary["config_sha256"] == hashlib.sha256(blob).hexdigest()
    assert summary["config_sha256"] == load_config(path).digest()
