"""Saving and loading fitted prediction models.

LASSO models are written as a CSV coefficient dump::

    # rcpred-model version=1 method=DR folds=3 family=lasso uses_z=0
    fold,param,index,value

with params ``intercept``, ``chosen_lambda``, ``n_features_in``,
``feature_subset`` (one row per index; absent when unrestricted) and ``coef``.
k-NN models are an opaque binary blob: the magic ``RCPKNN``, one version
byte, then length-prefixed ``.npy`` records of the fold arrays.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .core import DataError
from .methods import PredictionModel
from .regress import KnnModel, LassoModel

FORMAT_VERSION = 1
KNN_MAGIC = b"RCPKNN"


def model_filename(model: PredictionModel) -> str:
    return "model.bin" if model.fold_models[0].family == "knn" else "model.csv"


def save_model(model: PredictionModel, path) -> Path:
    path = Path(path)
    families = {m.family for m in model.fold_models}
    if families == {"lasso"}:
        path.write_text(_lasso_csv(model))
    elif families == {"knn"}:
        path.write_bytes(_knn_blob(model))
    else:
        raise DataError(f"cannot serialise fold models of families {sorted(families)}")
    return path


def load_model(path) -> PredictionModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(KNN_MAGIC):
        return _knn_from_blob(raw)
    return _lasso_from_csv(raw.decode("utf-8"), path)


def _lasso_csv(model: PredictionModel) -> str:
    buf = io.StringIO()
    buf.write(f"# rcpred-model version={FORMAT_VERSION} method={model.method} "
              f"folds={len(model.fold_models)} family=lasso uses_z={int(model.uses_z)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "param", "index", "value"])
    for k, m in enumerate(model.fold_models):
        w.writerow([k, "intercept", 0, repr(float(m.intercept))])
        w.writerow([k, "chosen_lambda", 0, repr(float(m.chosen_lambda))])
        w.writerow([k, "n_features_in", 0, m.n_features_in])
        for i, j in enumerate(m.feature_subset or ()):
            w.writerow([k, "feature_subset", i, j])
        for j, c in enumerate(m.coef):
            w.writerow([k, "coef", j, repr(float(c))])
    return buf.getvalue()


def _parse_header(line: str, path) -> dict:
    parts = line.lstrip("#").split()
    if not parts or parts[0] != "rcpred-model":
        raise DataError(f"{path}: not a model file")
    meta = dict(p.split("=", 1) for p in parts[1:])
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported model format version {meta.get('version')}")
    return meta


def _lasso_from_csv(text: str, path) -> PredictionModel:
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty model file")
    meta = _parse_header(lines[0], path)
    reader = csv.reader(lines[1:])
    if next(reader, None) != ["fold", "param", "index", "value"]:
        raise DataError(f"{path}: bad model header")
    folds = {}
    for fold, param, index, value in reader:
        d = folds.setdefault(int(fold), {"coef": {}, "feature_subset": {}})
        if param in ("coef", "feature_subset"):
            d[param][int(index)] = float(value) if param == "coef" else int(value)
        else:
            d[param] = float(value)
    models = []
    for k in sorted(folds):
        d = folds[k]
        coef = np.array([d["coef"][j] for j in sorted(d["coef"])])
        subset = tuple(d["feature_subset"][i] for i in sorted(d["feature_subset"])) or None
        width = len(coef)
        models.append(LassoModel(intercept=d["intercept"], coef=coef,
                                 chosen_lambda=d["chosen_lambda"], center=np.zeros(width),
                                 scale=np.ones(width), n_features_in=int(d["n_features_in"]),
                                 feature_subset=subset))
    if len(models) != int(meta["folds"]):
        raise DataError(f"{path}: expected {meta['folds']} folds, found {len(models)}")
    return PredictionModel(meta["method"], tuple(models), uses_z=meta.get("uses_z") == "1")


def _knn_blob(model: PredictionModel) -> bytes:
    arrays = {"method": np.array(model.method), "uses_z": np.array(int(model.uses_z))}
    for k, m in enumerate(model.fold_models):
        arrays[f"x_std_{k}"] = m.x_std
        arrays[f"y_{k}"] = m.y
        arrays[f"center_{k}"] = m.center
        arrays[f"scale_{k}"] = m.scale
        arrays[f"meta_{k}"] = np.array([m.neighbors, m.n_features_in])
        arrays[f"subset_{k}"] = np.array(m.feature_subset or (), dtype=np.int64)
    arrays["n_folds"] = np.array(len(model.fold_models))
    out = io.BytesIO()
    out.write(KNN_MAGIC + bytes([FORMAT_VERSION]))
    for name, arr in arrays.items():
        buf = io.BytesIO()
        np.save(buf, arr, allow_pickle=False)
        key = name.encode()
        out.write(struct.pack("<H", len(key)) + key)
        out.write(struct.pack("<Q", buf.tell()) + buf.getvalue())
    return out.getvalue()


def _read_records(raw: bytes) -> dict:
    arrays, pos = {}, 0
    try:
        while pos < len(raw):
            (klen,) = struct.unpack_from("<H", raw, pos)
            key = raw[pos + 2:pos + 2 + klen].decode()
            pos += 2 + klen
            (dlen,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            arrays[key] = np.load(io.BytesIO(raw[pos:pos + dlen]), allow_pickle=False)
            pos += dlen
    except (struct.error, ValueError) as exc:
        raise DataError(f"corrupt k-NN model blob: {exc}") from None
    return arrays


def _knn_from_blob(raw: bytes) -> PredictionModel:
    version = raw[len(KNN_MAGIC)]
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported k-NN model version {version}")
    z = _read_records(raw[len(KNN_MAGIC) + 1:])
    models = []
    for k in range(int(z["n_folds"])):
        neighbors, width = (int(t) for t in z[f"meta_{k}"])
        subset = tuple(int(j) for j in z[f"subset_{k}"]) or None
        models.append(KnnModel(x_std=z[f"x_std_{k}"], y=z[f"y_{k}"], neighbors=neighbors,
                               center=z[f"center_{k}"], scale=z[f"scale_{k}"],
                               n_features_in=width, feature_subset=subset))
    return PredictionModel(str(z["method"]), tuple(models), uses_z=bool(int(z["uses_z"])))
