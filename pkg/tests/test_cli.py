import csv
import json

import numpy as np
import pytest

from lvmf import cli
from lvmf import planner as PL


def write_config(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def latent_trace(tmp_path_factory):
    d = tmp_path_factory.mktemp("latent")
    cfg = write_config(d / "c.yaml", "problem: simple1d\ntask: GF\nmethods: [mufasa-beta]\n"
                                     "stop: {max_iters: 10}\nn_test: 256\n")
    assert cli.main(["run", "--config", cfg, "--out", str(d / "out")]) == 0
    return d / "out" / "mufasa-beta" / "rep_000.json"


def test_zero_iteration_run(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "problem: simple1d\ntask: GF\nmethods: [mufasa-beta]\n"
                                            "stop: {max_iters: 0}\nn_test: 256\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    lines = (tmp_path / "out" / "mufasa-beta" / "rep_000.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,0.0,")


def test_file_counts_and_paired_seeds(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "problem: sasena\ntask: BO\nmethods: [sfgp, mufasa-m]\n"
                                            "stop: {max_iters: 1}\nn_replicates: 5\nbase_seed: 3\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    assert len(list(out.glob("*/rep_*.csv"))) == 10
    assert len(list(out.glob("*/rep_*.json"))) == 10
    manifest = json.loads((out / "manifest.json").read_text())
    by_rep = {}
    for r in manifest["runs"]:
        by_rep.setdefault(r["replicate"], set()).add(r["doe_seed"])
    assert all(len(v) == 1 for v in by_rep.values()) and len(by_rep) == 5
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["sfgp", "mufasa-m"]
    assert int(rows[0]["n_traces"]) == 5 and int(rows[0]["infill_LF1"]) == 0


def test_summary_recomputable_from_csv(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "problem: simple1d\ntask: GF\nmethods: [sfgp]\n"
                                            "stop: {max_iters: 2}\nn_replicates: 2\nn_test: 256\n")
    out = tmp_path / "out"
    assert cli.main(["run", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "summary.csv") as fh:
        row = next(csv.DictReader(fh))
    finals = [PL.RunRecord.load_json(p).final.metric for p in sorted((out / "sfgp").glob("*.json"))]
    assert float(row["final_metric_median"]) == pytest.approx(np.median(finals), rel=1e-15)
    assert int(row["infill_HF"]) == 4


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "problem: simple1d\ntask: GF\nmethods: [mufasa-beta, sfgp]\n"
                                            "stop: {max_iters: 2}\nn_test: 256\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", cfg, "--out", str(a)]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(b)]) == 0
    for p in a.glob("*/rep_*.csv"):
        assert p.read_bytes() == (b / p.relative_to(a)).read_bytes()


def test_output_root_from_environment(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "exp.yaml", "problem: simple1d\nmethods: [sfgp]\nstop: {max_iters: 0}\n"
                                              "n_test: 64\n")
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", "--config", cfg]) == 0
    assert (tmp_path / "root" / "exp" / "sfgp" / "rep_000.csv").exists()


@pytest.mark.parametrize("text", [
    "problem: simple1d\nmethods: []\n",
    "problem: nowhere\nmethods: [sfgp]\n",
    "problem: simple1d\nmethods: [sfgp]\nstop: {max_iter: 3}\n",
    "problem: simple1d\nmethods: [sfgp]\nbogus: 1\n",
    "problem: simple1d\ntask: GF\nmethods: [mufasa-m]\n",
    "problem: simple1d\nmethods: [sfgp]\nn_replicates: 0\n",
    "problem: [unclosed\n",
])
def test_config_errors_exit_2(tmp_path, text):
    cfg = write_config(tmp_path / "c.yaml", text)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "none.yaml")]) == 2


def test_partial_and_total_failure_codes(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml", "problem: simple1d\nmethods: [sfgp]\nstop: {max_iters: 0}\n"
                                            "n_replicates: 2\nn_test: 64\n")
    real = PL.run
    calls = []

    def flaky(*a, **k):
        calls.append(1)
        if len(calls) == 1:
            raise RuntimeError("synthetic failure")
        return real(*a, **k)

    monkeypatch.setattr(PL, "run", flaky)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "p")]) == 4
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert [r["status"] for r in manifest["runs"]] == ["failed", "ok"]

    def broken(*a, **k):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(PL, "run", broken)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "q")]) == 3


def test_rrmse_table(capsys):
    assert cli.main(["rrmse-table", "simple1d", "--n-test", "4096"]) == 0
    out = capsys.readouterr().out
    for name, ref in [("LF1", "0.6054"), ("LF2", "0.3218"), ("LF3", "0.7256")]:
        assert any(line.startswith(name) and ref in line for line in out.splitlines())


def test_rrmse_rows_borehole():
    from lvmf.problems import get_problem

    rows = cli.rrmse_rows(get_problem("borehole"), n_test=2048)
    assert [r["reported"] for r in rows] == [3.6649, 1.3679, 0.4135, 0.4828]


def test_rrmse_table_identical_sources(tmp_path, capsys):
    f = tmp_path / "same.yaml"
    f.write_text("name: same\nbounds: [[-2, 3]]\nsources:\n"
                 "  - {name: HF, function: simple1d.hf, cost: 10, init: 2}\n"
                 "  - {name: COPY, function: simple1d.hf, cost: 1, init: 2}\n")
    assert cli.main(["rrmse-table", "--problem-file", str(f)]) == 0
    assert "0.0000" in capsys.readouterr().out


def test_latent_dump(latent_trace, tmp_path):
    out = tmp_path / "latent.csv"
    assert cli.main(["latent-dump", str(latent_trace), "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 40
    rec = PL.RunRecord.load_json(latent_trace)
    for it in rec.iterations[1:]:
        z = np.array([[float(r["z1"]), float(r["z2"])] for r in rows if int(r["iter"]) == it.iteration])
        assert np.array_equal(z[0], [0.0, 0.0])
        d = np.linalg.norm(z - z[0], axis=1)
        assert np.max(np.abs(d - it.distances)) < 1e-12


def test_latent_dump_include_initial(latent_trace, tmp_path):
    out = tmp_path / "latent.csv"
    assert cli.main(["latent-dump", str(latent_trace), "--out", str(out), "--include-initial"]) == 0
    assert len(out.read_text().splitlines()) == 1 + 44


def test_latent_dump_missing_file(tmp_path):
    assert cli.main(["latent-dump", str(tmp_path / "nope.json")]) != 0


def test_list_problems(capsys):
    assert cli.main(["list-problems"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in ("simple1d", "sasena", "borehole", "wingweight"))
