from pathlib import Path
import datetime
import json

import numpy as np

from dendplrnn.model.dendplrnn import DendParams, Variant
from dendplrnn.utils.utils import DataFormatError, to_jsonable

REQUIRED_FIELDS = ("A", "W", "h0", "alphas", "thresholds", "C", "obs", "L", "variant", "meta")


def _optional(array) -> list | None:
    return None if array is None else to_jsonable(array)


def checkpoint_payload(params: DendParams, variant: Variant, meta: dict | None = None) -> dict:
    meta = dict(meta or {})
    meta.setdefault(
        "created", datetime.datetime.now(datetime.timezone.utc).isoformat()
    )
    if params.identity_mapping:
        obs = {"mode": "identity", "N": params.N, "B": None}
    else:
        obs = {"mode": "matrix", "N": params.N, "B": to_jsonable(params.B_obs)}
    obs["Gamma"] = _optional(params.Gamma)

    return {
        "M": params.M,
        "A": to_jsonable(params.A),
        "W": to_jsonable(params.W),
        "h0": to_jsonable(params.h0),
        "alphas": to_jsonable(params.alphas),
        "thresholds": to_jsonable(params.thresholds),
        "fixed_basis": params.fixed_basis,
        "C": _optional(params.C),
        "obs": obs,
        "L": _optional(params.L),
        "Sigma": _optional(params.Sigma),
        "variant": variant.to_dict(),
        "meta": to_jsonable(meta),
    }


def save_checkpoint(path, params: DendParams, variant: Variant, meta: dict | None = None) -> Path:
    """Write the model as one JSON document. json writes floats with repr,
    the shortest decimal string that parses back to the same double.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(checkpoint_payload(params, variant, meta), fh, indent=1)
        fh.write("\n")
    return path


def params_from_payload(payload: dict) -> tuple[DendParams, Variant, dict]:
    missing = [name for name in REQUIRED_FIELDS if name not in payload]
    if missing:
        raise DataFormatError(f"checkpoint is missing fields {missing}")

    A = np.array(payload["A"], dtype=np.float64)
    M = A.shape[0]
    alphas = np.array(payload["alphas"], dtype=np.float64).reshape(-1)
    obs = payload["obs"]
    N = int(obs["N"])

    kwargs = {
        "A": A,
        "W": np.array(payload["W"], dtype=np.float64).reshape(M, M),
        "h0": payload["h0"],
        "alphas": alphas,
        "thresholds": np.array(payload["thresholds"], dtype=np.float64).reshape(
            alphas.shape[0], M
        ),
        "C": payload["C"],
        "Sigma": payload.get("Sigma"),
        "Gamma": obs.get("Gamma"),
        "fixed_basis": bool(payload.get("fixed_basis", False)),
    }
    if obs["mode"] == "identity":
        kwargs["n_obs"] = N
        if payload["L"] is not None:
            kwargs["L"] = np.array(payload["L"], dtype=np.float64).reshape(M - N, N)
    elif obs["mode"] == "matrix":
        kwargs["B_obs"] = np.array(obs["B"], dtype=np.float64).reshape(N, M)
    else:
        raise DataFormatError(f"unknown observation mode '{obs['mode']}'")

    try:
        params = DendParams(**kwargs)
    except ValueError as e:
        e.add_note("while restoring parameters from a checkpoint")
        raise e

    return params, Variant.from_dict(payload["variant"]), payload["meta"]


def load_checkpoint(path) -> tuple[DendParams, Variant, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    return params_from_payload(payload)
