"""File formats: JSON model files, JSONL/CSV sequence files and metric tables."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from .h3m_em import H3m
from .hmm import Hmm, Sequence

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Malformed input file; the message names the file and, if known, the line."""


def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise FormatError(f"cannot serialise non-finite number {x}")
    return "%.17g" % x


def dumps(obj, indent: int | None = None, _level: int = 0) -> str:
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        if indent is None:
            return "{" + ", ".join(items) + "}"
        pad = " " * (indent * (_level + 1))
        return "{\n" + ",\n".join(pad + it for it in items) + "\n" + " " * (indent * _level) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps(v, None) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return _num(obj)


def hmm_to_dict(h: Hmm) -> dict:
    return {
        "pi": h.pi,
        "A": h.trans,
        "emissions": [
            {"c": h.weights[s], "means": h.means[s], "covs": h.covs[s]} for s in range(h.S)
        ],
    }


def model_to_dict(model) -> dict:
    """Model-file document for an :class:`H3m` or a single :class:`Hmm`."""
    if isinstance(model, Hmm):
        kind, mix = "hmm", H3m(np.ones(1), [model])
    else:
        kind, mix = "h3m", model
    return {
        "v": SCHEMA_VERSION,
        "type": kind,
        "d": mix.d,
        "S": mix.S,
        "M": mix.M,
        "omega": mix.omega,
        "components": [hmm_to_dict(h) for h in mix.components],
    }


def write_model(path, model) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(model_to_dict(model), indent=1))
        fh.write("\n")


def _array(doc, key, shape, where):
    try:
        arr = np.asarray(doc[key], dtype=float)
    except KeyError:
        raise FormatError(f"{where}: missing key {key!r}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {key!r} is not a numeric array ({exc})") from None
    if arr.shape != shape:
        raise FormatError(f"{where}: {key!r} has shape {arr.shape}, expected {shape}")
    return arr


def model_from_dict(doc: dict, where: str = "model"):
    """Inverse of :func:`model_to_dict`; returns an ``H3m`` (``Hmm`` for type "hmm")."""
    if not isinstance(doc, dict):
        raise FormatError(f"{where}: top level must be an object")
    if doc.get("v") != SCHEMA_VERSION:
        raise FormatError(f"{where}: unsupported schema version {doc.get('v')!r}")
    kind = doc.get("type")
    if kind not in ("h3m", "hmm"):
        raise FormatError(f"{where}: type must be 'h3m' or 'hmm', got {kind!r}")
    try:
        d, S, M = int(doc["d"]), int(doc["S"]), int(doc["M"])
        comps_doc = list(doc["components"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: bad header field ({exc})") from None
    K = len(comps_doc)
    omega = _array(doc, "omega", (K,), where)
    comps = []
    for k, cd in enumerate(comps_doc):
        w = f"{where}: component {k}"
        pi = _array(cd, "pi", (S,), w)
        A = _array(cd, "A", (S, S), w)
        ems = cd.get("emissions")
        if not isinstance(ems, list) or len(ems) != S:
            raise FormatError(f"{w}: need {S} emission entries")
        c = np.stack([_array(e, "c", (M,), f"{w} state {s}") for s, e in enumerate(ems)])
        mu = np.stack([_array(e, "means", (M, d), f"{w} state {s}") for s, e in enumerate(ems)])
        cov = np.stack([_array(e, "covs", (M, d, d), f"{w} state {s}") for s, e in enumerate(ems)])
        try:
            comps.append(Hmm(pi, A, c, mu, cov))
        except ValueError as exc:
            raise FormatError(f"{w}: {exc}") from None
    try:
        model = H3m(omega, comps)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from None
    if kind == "hmm":
        if K != 1:
            raise FormatError(f"{where}: type 'hmm' must have exactly one component")
        return model.components[0]
    return model


def read_model(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return model_from_dict(doc, str(path))


def read_mixture(path) -> H3m:
    """Read a model file and always return an ``H3m``."""
    model = read_model(path)
    return H3m(np.ones(1), [model]) if isinstance(model, Hmm) else model


def _frames(raw, where):
    try:
        x = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: frames must be a numeric array") from None
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise FormatError(f"{where}: frames must be a non-empty (T, d) array")
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{where}: frames contain non-finite values")
    return x


def _read_jsonl(path):
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "frames" not in rec:
                raise FormatError(f"{where}: expected an object with a 'frames' field")
            sid = str(rec.get("id", f"seq{len(seqs)}"))
            seqs.append(Sequence(_frames(rec["frames"], where), id=sid))
    return seqs


def _read_csv(path):
    rows: dict = {}
    order = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or [h.strip() for h in header[:2]] != ["id", "t"] or len(header) < 3:
            raise FormatError(f"{path}:1: header must be 'id,t,<feature columns>'")
        d = len(header) - 2
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != d + 2:
                raise FormatError(f"{path}:{lineno}: expected {d + 2} fields, got {len(rec)}")
            try:
                t = int(rec[1])
                x = [float(v) for v in rec[2:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in x):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            sid = rec[0]
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            rows[sid].append((t, lineno, x))
    seqs = []
    for sid in order:
        recs = sorted(rows[sid])
        ts = [r[0] for r in recs]
        if len(set(ts)) != len(ts):
            dup = next(r for r, q in zip(recs[1:], recs) if r[0] == q[0])
            raise FormatError(f"{path}:{dup[1]}: duplicate t={dup[0]} for sequence {sid!r}")
        seqs.append(Sequence(np.array([r[2] for r in recs]), id=sid))
    return seqs


def read_sequences(path) -> list[Sequence]:
    """Read sequences from a ``.csv`` file or a JSON-lines file."""
    seqs = _read_csv(path) if str(path).lower().endswith(".csv") else _read_jsonl(path)
    if not seqs:
        raise FormatError(f"{path}: no sequences found")
    ids = [s.id for s in seqs]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate sequence ids")
    dims = {s.d for s in seqs}
    if len(dims) != 1:
        raise FormatError(f"{path}: sequences disagree on dimension {sorted(dims)}")
    return seqs


def write_sequences(path, seqs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(dumps({"id": s.id, "frames": s.frames}) + "\n")


def write_table(path, rows, columns) -> None:
    """CSV with a header row; floats at 17 significant digits, ``None`` as empty."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            out = []
            for col in columns:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif isinstance(v, (float, np.floating)):
                    out.append(_num(v))
                else:
                    out.append(str(v))
            writer.writerow(out)
