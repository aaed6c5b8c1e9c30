"""Dataset and config loading, JSON output and run manifests."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np

from .errors import InputError
from .estimator import Dataset, SolverConfig
from .rho import RhoFunction
from .spherical import tune_cutoff
from .structures import from_config


# -- JSON -----------------------------------------------------------------

def _encode(obj):
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        text = format(x, ".17g")
        return text if any(ch in text for ch in ".en") else text + ".0"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj):
    """JSON text with every real written to 17 significant digits."""
    return _encode(obj) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc


# -- datasets ---------------------------------------------------------------

def _dataset_from_json(doc, path):
    try:
        subjects = doc["subjects"]
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: missing 'subjects' list") from exc
    k = doc.get("k")
    q = doc.get("q")
    ys, Xs = [], []
    for i, s in enumerate(subjects):
        try:
            y = np.asarray(s["y"], dtype=float)
            X = np.asarray(s["X"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: subject {i}: needs numeric 'y' and 'X'") from exc
        if k is None:
            k = y.size
        if X.ndim == 1 and q == 1:
            X = X[:, None]
        if q is None and X.ndim == 2:
            q = X.shape[1]
        if y.shape != (k,):
            raise InputError(f"{path}: subject {i}: y has {y.size} entries, expected k={k}")
        if X.shape != (k, q):
            raise InputError(f"{path}: subject {i}: X has shape {X.shape}, expected ({k}, {q})")
        ys.append(y)
        Xs.append(X)
    return _build(ys, Xs, path)


def _build(ys, Xs, path):
    if len(ys) < 2:
        raise InputError(f"{path}: at least two subjects are required")
    try:
        return Dataset(np.array(ys), np.array(Xs))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _dataset_from_csv(path, k=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration as exc:
            raise InputError(f"{path}: empty file") from exc
        if header[:3] != ["subject", "row", "y"] or len(header) < 4:
            raise InputError(f"{path}: line 1: header must be subject,row,y,x1..xq")
        q = len(header) - 3
        groups: dict[str, list] = {}
        first_line: dict[str, int] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != q + 3:
                raise InputError(f"{path}: line {lineno}: expected {q + 3} fields, got {len(rec)}")
            try:
                row = int(rec[1])
                vals = [float(v) for v in rec[2:]]
            except ValueError as exc:
                raise InputError(f"{path}: line {lineno}: non-numeric entry") from exc
            if not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}: line {lineno}: non-finite entry")
            groups.setdefault(rec[0], []).append((row, vals, lineno))
            first_line.setdefault(rec[0], lineno)
    if not groups:
        raise InputError(f"{path}: no data rows")
    if k is None:
        k = len(next(iter(groups.values())))
    ys, Xs = [], []
    for sid, rows in groups.items():
        if len(rows) != k:
            raise InputError(
                f"{path}: line {first_line[sid]}: subject {sid} has {len(rows)} rows, expected k={k}"
            )
        rows.sort(key=lambda r: r[0])
        if len({r[0] for r in rows}) != k:
            raise InputError(f"{path}: line {first_line[sid]}: subject {sid} repeats a row index")
        ys.append([r[1][0] for r in rows])
        Xs.append([r[1][1:] for r in rows])
    return _build(ys, Xs, path)


def load_dataset(path, k=None):
    """Read a dataset from JSON (``.json``) or long-format CSV."""
    if not os.path.exists(path):
        raise InputError(f"{path}: no such file")
    if path.lower().endswith(".json"):
        return _dataset_from_json(read_json(path), path)
    return _dataset_from_csv(path, k)


def dataset_to_json(data: Dataset):
    return {
        "k": data.k,
        "q": data.q,
        "subjects": [{"y": y.tolist(), "X": X.tolist()} for y, X in zip(data.y, data.X)],
    }


# -- configs ----------------------------------------------------------------

def parse_rho(section, k):
    """``{"kind": ..., "c0": C}`` or ``{"kind": ..., "bdp": r}``."""
    kind = section.get("kind", "biweight")
    if ("c0" in section) == ("bdp" in section):
        raise InputError("rho needs exactly one of 'c0' and 'bdp'")
    try:
        c0 = float(section["c0"]) if "c0" in section else tune_cutoff(kind, k, float(section["bdp"]))
        return RhoFunction(kind, c0)
    except ValueError as exc:
        raise InputError(f"rho: {exc}") from exc


def parse_solver(section, seed=None):
    section = dict(section or {})
    if seed is not None:
        section["seed"] = int(seed)
    try:
        return SolverConfig(**section)
    except (TypeError, ValueError) as exc:
        raise InputError(f"solver: {exc}") from exc


@dataclass
class RunConfig:
    st: object
    rho: RhoFunction
    b0: float | None
    solver: SolverConfig
    model: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def load_config(path, seed=None):
    doc = read_json(path)
    try:
        st = from_config(doc["structure"])
    except KeyError as exc:
        raise InputError(f"{path}: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: structure: {exc}") from exc
    rho = parse_rho(doc.get("rho", {"kind": "biweight", "bdp": 0.5}), st.k)
    b0 = doc.get("b0")
    return RunConfig(
        st=st,
        rho=rho,
        b0=None if b0 is None else float(b0),
        solver=parse_solver(doc.get("solver"), seed),
        model=doc.get("model", {}),
        raw=doc,
    )


def resolve_seed(cli_seed, fallback=0):
    """--seed beats STRUCTS_SEED, which beats the config value."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get("STRUCTS_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise InputError(f"STRUCTS_SEED must be an integer, got {env!r}") from exc
    return int(fallback)


# -- manifests --------------------------------------------------------------

def tool_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _sha256_inputs(paths, args):
    h = hashlib.sha256()
    for p in paths:
        h.update(p.encode())
        with open(p, "rb") as fh:
            h.update(fh.read())
    h.update(json.dumps(args, sort_keys=True, default=str).encode())
    return h.hexdigest()


def write_manifest(path, command, inputs, outputs, args, seed, started):
    inputs = [p for p in inputs if p]
    manifest = {
        "command": command,
        "config_hash": _sha256_inputs(inputs, args),
        "seed": seed,
        "tool_version": tool_version(),
        "started": started,
        "finished": now(),
        "inputs": inputs,
        "outputs": list(outputs),
        "args": {k: v for k, v in args.items() if k != "func"},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")
    return manifest


def now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()
