from collections import namedtuple
from pathlib import Path
import hashlib
import json
import logging
import logging.handlers
import sys
import types
import typing

import numpy as np

LOG_FORMAT = "%(name)s\t::%(levelname)s::%(asctime)s::\t%(message)s"

artifact_stamp = namedtuple("artifact_stamp", ["config_hash", "data_hash"])


class DendError(Exception):
    pass


class ConfigError(DendError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class DataFormatError(DendError, ValueError):
    pass


class DegenerateDimensionError(DendError, ValueError):
    def __init__(self, dimension: int):
        super().__init__(f"dimension {dimension} has zero standard deviation")
        self.dimension = dimension


class IntegrationError(DendError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at integration step {step}")
        self.step = step


class DivergenceError(DendError):
    def __init__(self, step: int, message: str = "latent state diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class GradientError(DendError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block '{block}'")
        self.block = block


class TrainingDivergedError(DendError):
    def __init__(self, epoch: int, last_good_params, message: str = "loss is non-finite"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch
        self.last_good_params = last_good_params


class ArtifactMismatchError(DendError):
    pass


# JSON value types each annotated field type accepts
JSON_TYPES = {
    int: (int,),
    float: (int, float),
    bool: (bool,),
    str: (str,),
    list: (list,),
    dict: (dict,),
    type(None): (type(None),),
}


def check_field_types(cls, payload: dict, prefix: str) -> None:
    """Raise ConfigError naming the first field of a config dataclass whose
    JSON value does not match the annotation. Annotations outside JSON_TYPES
    are not checked.
    """
    hints = typing.get_type_hints(cls)
    for key, value in payload.items():
        hint = hints.get(key)
        if typing.get_origin(hint) in (typing.Union, types.UnionType):
            options = typing.get_args(hint)
        else:
            options = (hint,)
        options = [typing.get_origin(o) or o for o in options]
        if not all(o in JSON_TYPES for o in options):
            continue
        accepted = tuple(t for o in options for t in JSON_TYPES[o])
        if not isinstance(value, accepted) or (isinstance(value, bool) and bool not in accepted):
            names = " or ".join("null" if o is type(None) else o.__name__ for o in options)
            raise ConfigError(f"{prefix}.{key}", f"expected {names}, got {value!r}")


def init_logger(name, log_path, log_level):
    """Return a named logger writing to a weekly rotated file, or to stderr
    when no path is given.

    Args:
        name (str): Logger name
        log_path (str | Path | None): Log file path
        log_level (str): One of the standard logging level names

    Returns:
        logging.Logger: Configured logger
    """
    log = logging.getLogger(name)
    log.propagate = False
    log.setLevel(log_level)
    if not (log.hasHandlers()):
        if log_path:
            logging_fh = logging.handlers.TimedRotatingFileHandler(
                log_path, when="W0"
            )
        else:
            logging_fh = logging.StreamHandler(sys.stderr)
        logging_fh.setFormatter(logging.Formatter(LOG_FORMAT))
        log.addHandler(logging_fh)
    return log


def get_logger(log: logging.Logger | None, area: str) -> logging.Logger:
    if log is not None:
        return log
    return logging.getLogger(f"dendplrnn.{area}")


def to_jsonable(obj):
    """Convert numpy containers and scalars into plain python values so the
    standard json encoder can write them. Python float repr is the shortest
    string that round-trips, so doubles survive a save/load exactly. inf and
    NaN have no JSON spelling and become null.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return [to_jsonable(complex(v)) for v in obj.ravel()]
        return to_jsonable(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [to_jsonable(obj.real), to_jsonable(obj.imag)]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    """SHA-256 hex digest of the canonical JSON encoding of obj"""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(payload, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(to_jsonable(payload), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def append_jsonl(record: dict, path: Path) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(to_jsonable(record), sort_keys=True, allow_nan=False) + "\n")


def file_hash(*paths) -> str:
    """SHA-256 over the bytes of the given files, in order"""
    digest = hashlib.sha256()
    for path in paths:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()
