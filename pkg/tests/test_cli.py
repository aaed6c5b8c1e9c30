import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from structs import io
from structs import structures as S
from structs.cli import EXIT_INPUT, EXIT_MODULE, EXIT_OK, main
from structs.experiments import SimConfig, simulate_dataset

from conftest import X_SIM

STRUCTURE = {"kind": "lmm", "Z": [[1], [2], [3], [4]], "R": "identity"}


@pytest.fixture
def alt1_files(tmp_path, rho4):
    cfg = SimConfig(X=X_SIM, st=S.lmm(np.arange(1.0, 5.0)), beta0=[1.0, 1.0],
                    theta0=[1.0, 1.0], rho=rho4, n=60, seed=13)
    data = simulate_dataset(cfg, 0)
    data_path = tmp_path / "data.json"
    io.write_json(data_path, io.dataset_to_json(data))
    config = {
        "structure": STRUCTURE,
        "rho": {"kind": "biweight", "bdp": 0.5},
        "solver": {"n_subsamples": 30, "seed": 1},
        "model": {"X": X_SIM.tolist(), "beta0": [1.0, 1.0], "theta0": [1.0, 1.0], "n": 40},
    }
    config_path = tmp_path / "config.json"
    io.write_json(config_path, config)
    return data, str(data_path), str(config_path)


def write_csv_dataset(path, data, drop_last_row_of=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "row", "y"] + [f"x{j + 1}" for j in range(data.q)])
        for i in range(data.n):
            rows = data.k - 1 if i == drop_last_row_of else data.k
            for r in range(rows):
                w.writerow([i, r, repr(float(data.y[i, r]))]
                           + [repr(float(x)) for x in data.X[i, r]])


# -- fit --------------------------------------------------------------------------

def test_fit_writes_converged_result(alt1_files, tmp_path):
    _, data_path, config_path = alt1_files
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data_path, "--config", config_path, "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert abs(doc["constraint_residual"]) <= 1e-9 and doc["converged"]
    manifest = json.loads((tmp_path / "fit.json.manifest.json").read_text())
    assert manifest["command"] == "fit" and manifest["seed"] == 1
    assert len(manifest["config_hash"]) == 64


def test_fit_with_inference(alt1_files, tmp_path):
    data, data_path, config_path = alt1_files
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data_path, "--config", config_path, "--out", str(out),
                 "--with-inference"]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert len(doc["residuals"]) == data.n
    acov = np.array(doc["sandwich"]["acov"])
    assert acov.shape == (4, 4) and doc["sandwich"]["which"] == "empirical"


def test_fit_deterministic_across_formats(alt1_files, tmp_path):
    data, data_path, config_path = alt1_files
    csv_path = tmp_path / "data.csv"
    write_csv_dataset(csv_path, data)
    outs = []
    for i, src in enumerate([data_path, data_path, str(csv_path)]):
        out = tmp_path / f"fit{i}.json"
        assert main(["fit", "--data", src, "--config", config_path, "--out", str(out),
                     "--seed", "7"]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_seed_priority(alt1_files, tmp_path, monkeypatch):
    _, data_path, config_path = alt1_files
    monkeypatch.setenv("STRUCTS_SEED", "5")
    out = tmp_path / "fit.json"
    main(["fit", "--data", data_path, "--config", config_path, "--out", str(out)])
    assert json.loads(out.read_text())["seed"] == 5
    main(["fit", "--data", data_path, "--config", config_path, "--out", str(out), "--seed", "6"])
    assert json.loads(out.read_text())["seed"] == 6


def test_short_subject_is_input_error(alt1_files, tmp_path, capsys):
    data, _, config_path = alt1_files
    bad = tmp_path / "bad.csv"
    write_csv_dataset(bad, data, drop_last_row_of=2)
    code = main(["fit", "--data", str(bad), "--config", config_path, "--out", str(tmp_path / "o")])
    assert code == EXIT_INPUT
    err = capsys.readouterr().err
    assert "subject 2" in err and "line" in err


def test_malformed_json_reports_line(tmp_path, alt1_files, capsys):
    _, _, config_path = alt1_files
    bad = tmp_path / "bad.json"
    bad.write_text('{"k": 4,\n "subjects": [\n}')
    assert main(["fit", "--data", str(bad), "--config", config_path,
                 "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "line 3" in capsys.readouterr().err


def test_no_solution_exit_code(alt1_files, tmp_path):
    _, data_path, _ = alt1_files
    cfg = tmp_path / "starved.json"
    io.write_json(cfg, {"structure": STRUCTURE, "rho": {"kind": "biweight", "bdp": 0.5},
                        "solver": {"n_subsamples": 1, "max_iter": 1, "polish": False}})
    out = tmp_path / "fit.json"
    assert main(["fit", "--data", data_path, "--config", str(cfg), "--out", str(out)]) == EXIT_MODULE
    assert json.loads(out.read_text())["converged"] is False


def test_bad_rho_config(alt1_files, tmp_path):
    _, data_path, _ = alt1_files
    cfg = tmp_path / "c.json"
    io.write_json(cfg, {"structure": STRUCTURE, "rho": {"kind": "biweight", "bdp": 0.5, "c0": 3}})
    assert main(["fit", "--data", data_path, "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == EXIT_INPUT


# -- constants ----------------------------------------------------------------------

def test_constants_from_bdp(capsys):
    assert main(["constants", "--k", "4", "--bdp", "0.5"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["c0"] == pytest.approx(4.097, abs=0.005)
    assert doc["sigma2"] == pytest.approx(-0.1509, abs=1e-3)


def test_constants_from_c0(capsys):
    assert main(["constants", "--k", "4", "--c0", "4.097"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["r"] == pytest.approx(0.5, abs=0.001)


@pytest.mark.parametrize("argv", [
    ["constants", "--k", "0", "--bdp", "0.5"],
    ["constants", "--k", "4"],
    ["constants", "--k", "4", "--bdp", "0.5", "--c0", "4.0"],
])
def test_constants_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


# -- simulate, breakdown, influence, residuals --------------------------------------------

def test_simulate_rows(alt1_files, tmp_path):
    _, _, config_path = alt1_files
    out = tmp_path / "sim"
    assert main(["simulate", "--config", config_path, "--reps", "50", "--out", str(out),
                 "--parallel", "1", "--seed", "3"]) == EXIT_OK
    rows = list(csv.reader(open(out / "replications.csv")))
    assert len(rows) == 51
    doc = json.loads((out / "simresult.json").read_text())
    assert doc["reps"] == 50 and len(doc["estimates"]) == 50
    assert json.loads((out / "manifest.json").read_text())["command"] == "simulate"


def test_breakdown_m0(alt1_files, tmp_path):
    _, data_path, config_path = alt1_files
    out = tmp_path / "bd.json"
    assert main(["breakdown", "--data", data_path, "--config", config_path, "--m", "0",
                 "--t", "10", "1000", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["lambda1_path"] == [doc["clean_lambda1"]] * 2
    assert (tmp_path / "bd.json.manifest.json").exists()
    assert main(["breakdown", "--data", data_path, "--config", config_path,
                 "--m", "60"]) == EXIT_INPUT


def test_influence_point_and_explicit(alt1_files, tmp_path):
    data, data_path, config_path = alt1_files
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["influence", "--data", data_path, "--config", config_path, "--point", "3",
                 "--out", str(a)]) == EXIT_OK
    y = [str(v) for v in data.y[3]]
    X = [repr(float(v)) for v in data.X[3].ravel()]
    assert main(["influence", "--data", data_path, "--config", config_path, "--y", *y,
                 "--X", *X, "--out", str(b)]) == EXIT_OK
    da, db = json.loads(a.read_text()), json.loads(b.read_text())
    assert da == db
    assert set(da) == {"empirical", "elliptical"}
    assert len(da["empirical"]["if_vecC"]) == 16


def test_residuals_length(alt1_files, tmp_path):
    data, data_path, config_path = alt1_files
    fit = tmp_path / "fit.json"
    main(["fit", "--data", data_path, "--config", config_path, "--out", str(fit)])
    res = tmp_path / "res.csv"
    assert main(["residuals", "--data", data_path, "--fit", str(fit), "--out", str(res)]) == EXIT_OK
    rows = list(csv.reader(open(res)))
    assert rows[0] == ["subject", "residual", "rank"]
    assert len(rows) == data.n + 1
    assert sorted(int(r[2]) for r in rows[1:]) == list(range(1, data.n + 1))
    assert (tmp_path / "res.csv.manifest.json").exists()


def test_console_script(tmp_path):
    exe = shutil.which("structs")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "constants", "--k", "2", "--bdp", "0.5"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["k"] == 2
