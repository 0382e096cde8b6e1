import csv
import json

import numpy as np
import pytest

from coulomb_dft.cli import main
from coulomb_dft.ingest import Dataset, Molecule, parse_csv, write_csv
from coulomb_dft.krr import load_model

from .conftest import random_molecule

XYZ = ("3\nenergy=-10.5 label=water\nO 0 0 0\nH 0.96 0 0\nH -0.24 0.93 0\n"
       "2\nenergy=-4.0 label=h2\nH 0 0 0\nH 0 0 0.74\n")


def read_rows(path):
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.reader(lines))


def write_dataset(path, ds):
    path.write_text(write_csv(ds))
    return path


def small_dataset(rng, m=50):
    mols = tuple(random_molecule(rng, int(rng.integers(2, 9)), min_dist=1.8) for _ in range(m))
    energies = np.array([-40.0 * mol.n_atoms - float(np.sum(mol.atomic_numbers)) for mol in mols])
    return Dataset(mols, energies)


def test_convert_xyz_to_csv(tmp_path, capsys):
    src = tmp_path / "in.xyz"
    src.write_text(XYZ)
    out = tmp_path / "out.csv"
    assert main(["convert", str(src), "--out", str(out)]) == 0
    ds = parse_csv(out.read_text())
    assert len(ds) == 2
    assert ds.molecules[1].positions[1, 2] == pytest.approx(0.74 * 1.8897259886)
    assert out.read_text().startswith("# coulomb-dft")
    # converting the canonical CSV again changes nothing but the comment header
    again = tmp_path / "again.csv"
    assert main(["convert", str(out), "--out", str(again)]) == 0
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("#")]  # noqa: E731
    assert strip(again) == strip(out)


def test_convert_bad_frame(tmp_path, capsys):
    src = tmp_path / "bad.xyz"
    src.write_text("1\nenergy=0\nZz 0 0 0\n")
    assert main(["convert", str(src), "--out", str(tmp_path / "o.csv")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error[ingest]")
    assert "line 3" in err


def test_featurize_raw_and_labels(tmp_path, rng):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 7))
    out = tmp_path / "f.csv"
    assert main(["featurize", str(data), "--out", str(out)]) == 0
    rows = read_rows(out)
    n_max = max(len(r) for r in rows) and parse_csv(data.read_text()).max_atoms
    assert len(rows) == 7 and all(len(r) == n_max * (n_max + 1) // 2 for r in rows)
    assert main(["featurize", str(data), "--labels", "--domain", "dft-complex",
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert all(len(r) == 1 + n_max * (n_max + 1) for r in rows)


def test_featurize_empty_dataset(tmp_path, capsys):
    data = tmp_path / "e.csv"
    data.write_text("label,energy_kcalmol,N\n")
    assert main(["featurize", str(data), "--out", str(tmp_path / "f.csv")]) == 1
    assert "error[featurize]" in capsys.readouterr().err


def test_featurize_dft_mag_single_atom(tmp_path):
    # A lone carbon padded to two atoms gives the impulse [36.858..., 0, 0];
    # its DFT magnitude is flat at 0.5 * 6**2.4.
    ds = Dataset((Molecule([6], [[0, 0, 0]]), Molecule([1, 1], [[0, 0, 0], [0, 0, 1.4]])),
                 [0.0, 0.0])
    data = write_dataset(tmp_path / "d.csv", ds)
    out = tmp_path / "f.csv"
    assert main(["featurize", str(data), "--domain", "dft-mag", "--out", str(out)]) == 0
    row = [float(v) for v in read_rows(out)[0]]
    np.testing.assert_allclose(row, [36.8581051994259473] * 3, rtol=1e-14)


def test_spectrogram_outputs(tmp_path, qm7):
    data = tmp_path / "q.csv"
    write_dataset(data, qm7.subset(range(20)))
    prefix = tmp_path / "spec"
    assert main(["spectrogram", str(data), "--index", "3", "--out", str(prefix),
                 "--n-max", "23"]) == 0
    rows = read_rows(str(prefix) + ".csv")
    assert len(rows) == 32 and len(rows[0]) == 17  # header + 31 frames
    pgm = (tmp_path / "spec.pgm").read_bytes()
    assert pgm.startswith(b"P5\n31 17\n65535\n")
    assert len(read_rows(str(prefix) + "_signal.csv")) == 277


def test_spectrogram_window_too_long(tmp_path, capsys):
    ds = Dataset((Molecule([1], [[0, 0, 0]]),), [0.0])
    data = write_dataset(tmp_path / "d.csv", ds)
    assert main(["spectrogram", str(data), "--out", str(tmp_path / "s")]) == 1
    assert "zero-pad" in capsys.readouterr().err


def test_train_single_sample(tmp_path):
    ds = Dataset((Molecule([8], [[0, 0, 0]]),), [3.0])
    data = write_dataset(tmp_path / "one.csv", ds)
    model_path = tmp_path / "m.krr.json"
    assert main(["train", str(data), "--gamma", "1", "--lambda", "0.5", "--train-fraction", "1",
                 "--out", str(model_path)]) == 0
    model = load_model(model_path)
    assert model.weights[0] == pytest.approx(2.0, rel=1e-14)
    assert model.descriptor_meta["provenance"]["inputs"]


def test_train_sigma_and_missing_target(tmp_path, rng, capsys):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 20))
    model_path = tmp_path / "m.krr.json"
    assert main(["train", str(data), "--sigma", "40", "--lambda", "1e-3",
                 "--out", str(model_path)]) == 0
    assert load_model(model_path).kernel.input_sigma == 40.0
    assert main(["train", str(data), "--gamma", "1e-3", "--lambda", "1e-3", "--target", "homo",
                 "--out", str(model_path)]) == 1
    assert "error[ingest]" in capsys.readouterr().err
    assert main(["train", str(data), "--gamma", "1e-3", "--lambda", "0",
                 "--out", str(model_path)]) == 1


def test_train_predict_interpolation(tmp_path, rng):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 50))
    model_path = tmp_path / "m.krr.json"
    assert main(["train", str(data), "--gamma", "2e-3", "--lambda", "0", "--allow-zero-lambda",
                 "--train-fraction", "1", "--out", str(model_path)]) == 0
    out = tmp_path / "p.csv"
    assert main(["predict", str(model_path), str(data), "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["label", "predicted_kcal_per_mol", "reference_kcal_per_mol"]
    pred = np.array([float(r[1]) for r in rows[1:]])
    ref = np.array([float(r[2]) for r in rows[1:]])
    np.testing.assert_allclose(pred, ref, rtol=1e-6)
    assert main(["predict", str(model_path), str(data), "--unit", "eV", "--out", str(out)]) == 0
    pred_ev = np.array([float(r[1]) for r in read_rows(out)[1:]])
    np.testing.assert_allclose(pred_ev * 23.0605, pred, rtol=1e-12)


def test_predict_far_query_warns(tmp_path, capsys):
    train = Dataset((Molecule([1, 1], [[0, 0, 0], [0, 0, 1.4]]),), [3.0])
    far = Dataset((Molecule([16, 16], [[0, 0, 0], [0, 0, 0.5]]),), [0.0])
    model_path = tmp_path / "m.krr.json"
    assert main(["train", str(write_dataset(tmp_path / "t.csv", train)), "--gamma", "10",
                 "--lambda", "0.5", "--train-fraction", "1", "--out", str(model_path)]) == 0
    out = tmp_path / "p.csv"
    assert main(["predict", str(model_path), str(write_dataset(tmp_path / "f.csv", far)),
                 "--out", str(out)]) == 0
    assert "warning[predict]" in capsys.readouterr().err
    assert float(read_rows(out)[1][1]) == 0.0


def test_predict_bad_model(tmp_path, rng, capsys):
    bad = tmp_path / "m.krr.json"
    bad.write_text('{"format_version": 1, "weights": [')
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 3))
    assert main(["predict", str(bad), str(data), "--out", str(tmp_path / "p.csv")]) == 1
    assert "error[load]" in capsys.readouterr().err


def test_gridsearch_single_cell(tmp_path, rng):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 40))
    out = tmp_path / "gs"
    assert main(["gridsearch", str(data), "--gamma-grid", "2^-10", "--lambda-grid", "1e-6",
                 "--domains", "raw", "--out", str(out)]) == 0
    doc = json.loads((out / "gridsearch.json").read_text())
    assert doc["results"]["raw"]["best"] == {"gamma": 2.0 ** -10, "lambda": 1e-6}
    assert len(read_rows(out / "grid_raw.csv")) == 2


def test_experiment_outputs_and_determinism(tmp_path, rng):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 60))
    args = ["experiment", str(data), "--gamma-grid", "pow2:-14:-6:2", "--lambda-grid", "1e-6,1e-3",
            "--coarse-subsample", "30", "--fine-octaves", "1"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--threads", "1"] + args + ["--out", str(a)]) == 0
    assert main(["--threads", "1"] + args + ["--out", str(b)]) == 0
    for name in ("report.json", "scatter_raw.csv", "scatter_dft.csv", "grid_raw.csv", "grid_dft.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    doc = json.loads((a / "report.json").read_text())
    assert doc["provenance"]["version"] == "0.1.0"
    assert set(doc["domains"]) == {"raw", "dft_magnitude"}
    assert len(read_rows(a / "scatter_raw.csv")) == 1 + 12


def test_experiment_multi_seed(tmp_path, rng):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 40))
    out = tmp_path / "ms"
    assert main(["experiment", str(data), "--seed", "1,2", "--gamma-grid", "2^-8",
                 "--lambda-grid", "1e-4", "--domains", "raw", "--no-staged", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [1, 2]
    assert (out / "seed_1" / "report.json").exists()


def test_experiment_bad_grid(tmp_path, rng, capsys):
    data = write_dataset(tmp_path / "d.csv", small_dataset(rng, 20))
    assert main(["experiment", str(data), "--gamma-grid", "pow2:x", "--out", str(tmp_path)]) == 1
    assert "error[config]" in capsys.readouterr().err
