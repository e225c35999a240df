"""Model JSON documents and CSV exports (curves, traces)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .basis import SplineBasis
from .model import FittedCurves, MultiLevelParams
from .stn import StNParams

FORMAT = "mlfpca-model"
VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass
class SavedModel:
    """Everything needed to rebuild fitted curves without the data.

    ``alpha`` is ``(M, K)``; ``beta`` maps variable index to an
    ``(n_i, L_i)`` array of replicate loadings.
    """

    basis: SplineBasis
    params: MultiLevelParams
    variable_ids: tuple[str, ...]
    replicate_ids: tuple[tuple[str, ...], ...]
    alpha: np.ndarray
    beta: list[np.ndarray]
    fit: dict = field(default_factory=dict)

    def padded_beta(self) -> np.ndarray:
        R = max(len(r) for r in self.replicate_ids)
        Lmax = max(self.params.L, default=0)
        out = np.zeros((len(self.variable_ids), R, Lmax))
        for i, b in enumerate(self.beta):
            out[i, : b.shape[0], : b.shape[1]] = b
        return out

    def curves(self) -> FittedCurves:
        """Posterior-mean curves on the basis grid."""
        Bg = self.basis.B
        P = self.params
        coef = P.mean_coefficients() + self.alpha @ P.Theta_alpha.T
        var = coef @ Bg.T
        beta = self.padded_beta()
        Th, _ = P.padded_beta()
        rep = var[:, None, :] + np.einsum("ipl,irl->irp", Th, beta) @ Bg.T
        R = beta.shape[1]
        mask = np.array([[j < len(r) for j in range(R)] for r in self.replicate_ids])
        return FittedCurves(
            grid=self.basis.grid.copy(),
            variable_ids=tuple(self.variable_ids),
            replicate_ids=tuple(self.replicate_ids),
            variable=var,
            replicate=rep * mask[:, :, None],
            replicate_mask=mask,
            grand_mean=None if P.free_mean else Bg @ P.theta_mu,
        )


def _matrix(a) -> list:
    a = np.asarray(a, float)
    return [[float(x) for x in row] for row in a]


def _vector(a) -> list:
    return [float(x) for x in np.asarray(a, float).ravel()]


def model_to_dict(model: SavedModel) -> dict:
    P = model.params
    variables = {}
    for i, vid in enumerate(model.variable_ids):
        variables[vid] = {
            "Theta_beta": _matrix(P.Theta_beta[i]),
            "D_beta": _vector(P.D_beta[i]),
            "sigma2": float(P.sigma2[i]),
            "theta_mu": _vector(P.theta_mu[i]) if P.free_mean else None,
            "alpha": _vector(model.alpha[i]),
            "replicates": {
                rid: _vector(model.beta[i][j]) for j, rid in enumerate(model.replicate_ids[i])
            },
        }
    return {
        "format": FORMAT,
        "version": VERSION,
        "variant": P.variant,
        "basis": model.basis.to_dict(),
        "ranks": {"K": P.K, "L": {vid: int(l) for vid, l in zip(model.variable_ids, P.L)}},
        "free_mean": bool(P.free_mean),
        "theta_mu": None if P.free_mean else _vector(P.theta_mu),
        "Theta_alpha": _matrix(P.Theta_alpha),
        "D_alpha": None if P.D_alpha is None else _vector(P.D_alpha),
        "stn": None if P.stn is None else [s.to_dict() for s in P.stn],
        "variables": variables,
        "fit": model.fit,
    }


def model_from_dict(d: dict) -> SavedModel:
    if d.get("format") != FORMAT:
        raise ModelFileError("not a model document")
    if d.get("version") != VERSION:
        raise ModelFileError(f"unsupported model version {d.get('version')!r}")
    try:
        basis = SplineBasis.from_dict(d["basis"])
        p = basis.p
        K = int(d["ranks"]["K"])
        vids = tuple(d["variables"])
        Ta = np.array(d["Theta_alpha"], float).reshape(p, K)
        Tb, Db, s2, mus, alpha, beta, rids = [], [], [], [], [], [], []
        for vid in vids:
            v = d["variables"][vid]
            Li = int(d["ranks"]["L"][vid])
            Tb.append(np.array(v["Theta_beta"], float).reshape(p, Li))
            Db.append(np.array(v["D_beta"], float).reshape(Li))
            s2.append(float(v["sigma2"]))
            if d["free_mean"]:
                mus.append(np.array(v["theta_mu"], float))
            alpha.append(np.array(v["alpha"], float).reshape(K))
            reps = v["replicates"]
            rids.append(tuple(reps))
            beta.append(np.array([reps[r] for r in reps], float).reshape(len(reps), Li))
        params = MultiLevelParams(
            theta_mu=np.array(mus) if d["free_mean"] else np.array(d["theta_mu"], float),
            Theta_alpha=Ta,
            Theta_beta=Tb,
            D_beta=Db,
            sigma2=np.array(s2),
            D_alpha=None if d["D_alpha"] is None else np.array(d["D_alpha"], float),
            stn=None if d["stn"] is None else [StNParams.from_dict(s) for s in d["stn"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed model document: {exc}") from exc
    return SavedModel(
        basis=basis,
        params=params,
        variable_ids=vids,
        replicate_ids=tuple(rids),
        alpha=np.array(alpha).reshape(len(vids), K),
        beta=beta,
        fit=dict(d.get("fit") or {}),
    )


def save_model(model: SavedModel, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, allow_nan=True)
        fh.write("\n")


def load_model(path: str | Path) -> SavedModel:
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"no such file: {path}")
    try:
        with path.open(encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: invalid JSON: {exc}") from exc
    return model_from_dict(d)


def saved_from_fit(fit, basis: SplineBasis, fitter: str) -> SavedModel:
    """Bundle a Gaussian or skew-t-normal fit result for saving."""
    designs = fit.designs
    P = fit.params
    beta_pad = fit.moments.beta
    beta = [beta_pad[i, : designs.n_rep[i], : P.L[i]].copy() for i in range(designs.M)]
    meta = {"fitter": fitter, "iterations": int(fit.iterations), "converged": bool(fit.converged)}
    if hasattr(fit, "loglik"):
        meta["loglik"] = float(fit.loglik)
    return SavedModel(
        basis=basis,
        params=P,
        variable_ids=designs.variable_ids,
        replicate_ids=designs.replicate_ids,
        alpha=fit.moments.alpha.copy(),
        beta=beta,
        fit=meta,
    )


# --- CSV exports -----------------------------------------------------------------


def write_curves_csv(curves: FittedCurves, path: str | Path) -> None:
    """Long-format curves; the replicate field is empty for variable means."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variable", "replicate", "time", "value"))
        grid = [repr(float(t)) for t in curves.grid]
        for i, vid in enumerate(curves.variable_ids):
            for t, v in zip(grid, curves.variable[i]):
                w.writerow((vid, "", t, repr(float(v))))
            for j, rid in enumerate(curves.replicate_ids[i]):
                for t, v in zip(grid, curves.replicate[i, j]):
                    w.writerow((vid, rid, t, repr(float(v))))


def read_curves_csv(path: str | Path) -> FittedCurves:
    """Inverse of ``write_curves_csv`` (variables in file order)."""
    var: dict[str, dict[float, float]] = {}
    reps: dict[str, dict[str, dict[float, float]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != ("variable", "replicate", "time", "value"):
            raise ModelFileError(f"{path}: not a curves file")
        for row in r:
            if not row:
                continue
            vid, rid, t, v = row[0], row[1], float(row[2]), float(row[3])
            if rid == "":
                var.setdefault(vid, {})[t] = v
            else:
                reps.setdefault(vid, {}).setdefault(rid, {})[t] = v
                var.setdefault(vid, {})
    vids = tuple(var)
    grid = np.array(sorted(next(iter(var.values()))))
    R = max((len(reps.get(v, {})) for v in vids), default=0)
    variable = np.array([[var[v][t] for t in grid] for v in vids])
    replicate = np.zeros((len(vids), R, len(grid)))
    mask = np.zeros((len(vids), R), dtype=bool)
    rids = []
    for i, v in enumerate(vids):
        rr = reps.get(v, {})
        rids.append(tuple(rr))
        for j, rid in enumerate(rr):
            replicate[i, j] = [rr[rid][t] for t in grid]
            mask[i, j] = True
    return FittedCurves(grid, vids, tuple(rids), variable, replicate, mask)


def write_gaussian_trace(trace: Sequence, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "loglik", "delta"))
        for row in trace:
            w.writerow((row.iteration, repr(row.loglik), "" if np.isnan(row.delta) else repr(row.delta)))


def write_stn_trace(trace: Sequence, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("iteration", "block", "summary_statistic", "value"))
        for row in trace:
            w.writerow((row.iteration, row.block, row.summary_statistic, repr(row.value)))
