from __future__ import annotations

import json

import numpy as np
import pytest

from mlfpca.gaussian import fit_multilevel_gaussian, fit_singlelevel_gaussian
from mlfpca.mcem import GibbsConfig, fit_multilevel_stn
from mlfpca.serialize import (
    ModelFileError,
    load_model,
    model_from_dict,
    model_to_dict,
    read_curves_csv,
    save_model,
    saved_from_fit,
    write_curves_csv,
)


def _assert_same(a, b):
    da, db = model_to_dict(a), model_to_dict(b)
    assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)


@pytest.fixture(scope="module")
def gaussian_saved(sim_small):
    ds, truth = sim_small
    return saved_from_fit(fit_multilevel_gaussian(ds, truth.basis, 2, 1), truth.basis, "gaussian")


def test_round_trip_is_exact(gaussian_saved, tmp_path):
    path = tmp_path / "m.json"
    save_model(gaussian_saved, path)
    back = load_model(path)
    _assert_same(back, gaussian_saved)
    np.testing.assert_array_equal(back.params.Theta_alpha, gaussian_saved.params.Theta_alpha)
    np.testing.assert_array_equal(back.curves().variable, gaussian_saved.curves().variable)


def test_single_and_stn_round_trip(sim_small, tmp_path):
    ds, truth = sim_small
    single = saved_from_fit(fit_singlelevel_gaussian(ds, truth.basis, 1), truth.basis, "single")
    stn = saved_from_fit(
        fit_multilevel_stn(ds, truth.basis, 2, 1, GibbsConfig(sweeps_S=20, burn_in=5, mcem_iterations=2)),
        truth.basis,
        "stn",
    )
    for m in (single, stn):
        save_model(m, tmp_path / "x.json")
        _assert_same(load_model(tmp_path / "x.json"), m)
    assert model_to_dict(stn)["stn"][0].keys() == {"xi", "sigma2", "lambda", "nu"}
    assert model_to_dict(single)["theta_mu"] is None


def test_curves_from_model_match_fit(sim_small, gaussian_saved):
    fit_curves = gaussian_saved.curves()
    assert fit_curves.variable.shape == (40, gaussian_saved.basis.L)
    assert fit_curves.grand_mean is not None


def test_curves_csv_round_trip(gaussian_saved, tmp_path):
    c = gaussian_saved.curves()
    path = tmp_path / "c.csv"
    write_curves_csv(c, path)
    back = read_curves_csv(path)
    np.testing.assert_array_equal(back.variable, c.variable)
    np.testing.assert_array_equal(back.replicate[back.replicate_mask], c.replicate[c.replicate_mask])
    first = path.read_text().splitlines()[1].split(",")
    assert first[1] == ""


def test_bad_documents(tmp_path, gaussian_saved):
    with pytest.raises(ModelFileError, match="no such file"):
        load_model(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ModelFileError, match="invalid JSON"):
        load_model(tmp_path / "bad.json")
    with pytest.raises(ModelFileError):
        model_from_dict({"format": "other"})
    d = model_to_dict(gaussian_saved)
    d["version"] = 99
    with pytest.raises(ModelFileError, match="version"):
        model_from_dict(d)
    d = model_to_dict(gaussian_saved)
    del d["Theta_alpha"]
    with pytest.raises(ModelFileError, match="malformed"):
        model_from_dict(d)
