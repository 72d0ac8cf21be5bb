"""Model files, numeric output and run manifests.

A model file is JSON::

    {
      "dim": 1,
      "mode": "LTI",                      # or "LTV"
      "A": [[-0.1]],
      "a_hat": [25.0],
      "reset": {"J": [[0.5]], "B": [[0.25]], "c_hat": [0.5],
                "kernel": "binomial_partition"},
      "distribution": {"family": "exponential", "mean": 2.0},
      "ltv_structure_hint": "general"     # optional
    }

Matrices are row-major nested arrays; omitted reset terms are zero (J defaults
to the identity).  Any entry may instead be ``{"kind": "expr", "body": "..."}``
with an expression in ``tau`` (see ``ttshs.expr``).  For ``dim`` 1 a bare number
is accepted in place of ``[[x]]`` or ``[x]``.
"""

import csv
import hashlib
import io as _io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelParseError, ShapeMismatchError
from .expr import Expr
from .model import HINTS, KERNELS, MODES, TimerFunction, TtshsModel
from .timing import EventTimeDistribution

MACHINE_DIGITS = 17
HUMAN_DIGITS = 6


# -- parsing ---------------------------------------------------------------------
def _locate(text, needle):
    """1-based (line, column) of ``needle`` in ``text``, or (None, None)."""
    pos = text.find(needle)
    if pos < 0:
        return None, None
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def _entry(v, where, text):
    if isinstance(v, dict):
        if v.get("kind") != "expr" or not isinstance(v.get("body"), str):
            raise ModelParseError(f"{where}: entry objects must be {{\"kind\": \"expr\", \"body\": \"...\"}}",
                                  *_locate(text, json.dumps(v)[:20]))
        try:
            return Expr(v["body"], where)
        except ModelParseError as exc:
            line, col = _locate(text, json.dumps(v["body"]))
            if line is None:
                raise
            # +1 skips the opening quote of the JSON string
            raise ModelParseError(str(exc).split(" (line")[0], line, col + (exc.column or 1)) from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ModelParseError(f"{where}: expected a number or an expr object, got {type(v).__name__}",
                              *_locate(text, json.dumps(v)))
    return float(v)


def _field(raw, shape, where, text, default):
    if raw is None:
        return TimerFunction(default, shape, where)
    if not isinstance(raw, list) and int(np.prod(shape)) == 1:
        raw = [raw] if len(shape) == 1 else [[raw]]
    if len(shape) == 1:
        if not isinstance(raw, list) or len(raw) != shape[0]:
            raise ShapeMismatchError(f"{where} must be a list of length {shape[0]}")
        vals = [_entry(v, f"{where}[{i}]", text) for i, v in enumerate(raw)]
    else:
        if (not isinstance(raw, list) or len(raw) != shape[0]
                or any(not isinstance(r, list) or len(r) != shape[1] for r in raw)):
            raise ShapeMismatchError(f"{where} must be a {shape[0]}x{shape[1]} nested list")
        vals = [[_entry(v, f"{where}[{i}][{j}]", text) for j, v in enumerate(r)] for i, r in enumerate(raw)]
    arr = np.empty(shape, dtype=object)
    arr[...] = vals if len(shape) == 1 else [list(r) for r in vals]
    return TimerFunction(arr, shape, where)


_TOP_KEYS = {"dim", "mode", "A", "a_hat", "reset", "distribution", "ltv_structure_hint"}
_RESET_KEYS = {"J", "r_hat", "Q", "B", "c_hat", "D", "kernel"}


def parse_model(text, base_dir=None):
    """(model, distribution or None) from model-file text."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ModelParseError("model file must contain a JSON object", 1, 1)
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ModelParseError(f"unknown key '{key}'", *_locate(text, json.dumps(key)))
    dim = doc.get("dim")
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 1:
        raise ModelParseError("'dim' must be a positive integer", *_locate(text, '"dim"'))
    mode = doc.get("mode", "LTI")
    if mode not in MODES:
        raise ModelParseError(f"'mode' must be one of {MODES}", *_locate(text, '"mode"'))
    hint = doc.get("ltv_structure_hint", "general")
    if hint not in HINTS:
        raise ModelParseError(f"'ltv_structure_hint' must be one of {HINTS}", *_locate(text, '"ltv_structure_hint"'))
    if "A" not in doc:
        raise ModelParseError("missing key 'A'", 1, 1)
    reset = doc.get("reset", {})
    if not isinstance(reset, dict):
        raise ModelParseError("'reset' must be an object", *_locate(text, '"reset"'))
    unknown = set(reset) - _RESET_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ModelParseError(f"unknown reset key '{key}'", *_locate(text, json.dumps(key)))
    kernel = reset.get("kernel", "gaussian_matched")
    if kernel not in KERNELS:
        raise ModelParseError(f"reset kernel must be one of {KERNELS}", *_locate(text, '"kernel"'))
    n = dim
    sq, vc = (n, n), (n,)
    fields = {
        "A": _field(doc["A"], sq, "A", text, np.zeros(sq)),
        "a_hat": _field(doc.get("a_hat"), vc, "a_hat", text, np.zeros(vc)),
        "J": _field(reset.get("J"), sq, "reset.J", text, np.eye(n)),
        "r_hat": _field(reset.get("r_hat"), vc, "reset.r_hat", text, np.zeros(vc)),
        "Q": _field(reset.get("Q"), sq, "reset.Q", text, np.zeros(sq)),
        "B": _field(reset.get("B"), sq, "reset.B", text, np.zeros(sq)),
        "c_hat": _field(reset.get("c_hat"), vc, "reset.c_hat", text, np.zeros(vc)),
        "D": _field(reset.get("D"), sq, "reset.D", text, np.zeros(sq)),
    }
    if mode == "LTI":
        varying = [k for k, f in fields.items() if not f.is_constant]
        if varying:
            line, col = _locate(text, '"mode"')
            if line is None:
                line, col = _locate(text, json.dumps(varying[0]))
            raise ModelParseError(f"LTI model has tau-dependent entries in {varying[0]}; use mode LTV", line, col)
        model = TtshsModel.lti(*(fields[k].const for k in ("A", "a_hat", "J", "r_hat", "Q", "B", "c_hat", "D")),
                               kernel=kernel)
    else:
        model = TtshsModel.ltv(n, fields["A"], fields["a_hat"], fields["J"], fields["r_hat"], fields["Q"],
                               fields["B"], fields["c_hat"], fields["D"], kernel=kernel, hint=hint)
    dist = None
    if "distribution" in doc:
        dist = EventTimeDistribution.from_spec(doc["distribution"], base_dir)
    return model, dist


def load_model(path):
    """(model, distribution or None, sha256 of the file bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    digest = hashlib.sha256(data).hexdigest()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise ModelParseError("model file is not UTF-8 text", 1, 1) from None
    model, dist = parse_model(text, os.path.dirname(os.path.abspath(path)))
    return model, dist, digest


def model_to_dict(model, dist=None):
    r = model.reset
    doc = {
        "dim": model.dim,
        "mode": model.mode,
        "A": model.drift_matrix.to_spec(),
        "a_hat": model.drift_offset.to_spec(),
        "reset": {
            "J": r.J.to_spec(),
            "r_hat": r.r_hat.to_spec(),
            "Q": r.Q.to_spec(),
            "B": r.B.to_spec(),
            "c_hat": r.c_hat.to_spec(),
            "D": r.D.to_spec(),
            "kernel": r.kernel,
        },
    }
    if model.mode == "LTV":
        doc["ltv_structure_hint"] = model.ltv_structure_hint
    if dist is not None:
        doc["distribution"] = dist.to_spec()
    return doc


# -- output ----------------------------------------------------------------------
def fmt(x, digits=MACHINE_DIGITS):
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, f".{digits}g")


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj, digits=MACHINE_DIGITS, indent=2, _level=0):
    """JSON text with floats written to ``digits`` significant digits."""
    obj = _plain(obj)
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, digits, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        parts = [dumps(v, digits, indent, _level + 1) for v in obj]
        if all(not isinstance(_plain(v), (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(parts) + "]"
        return "[\n" + ",\n".join(pad + p for p in parts) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt(obj, digits)
    return json.dumps(str(obj))


def csv_text(header, rows, digits=MACHINE_DIGITS):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v, digits) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def flatten(doc, prefix=""):
    """Nested mapping/arrays to (key, scalar) pairs, for CSV reports."""
    out = []
    doc = _plain(doc)
    if isinstance(doc, dict):
        for k, v in doc.items():
            out.extend(flatten(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(doc, (list, tuple)):
        for i, v in enumerate(doc):
            out.extend(flatten(v, f"{prefix}[{i}]"))
    else:
        out.append((prefix, doc))
    return out


def write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- manifests -------------------------------------------------------------------
def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class RunManifest:
    command: str
    model_file_hash: str = None
    distribution: dict = None
    config: dict = field(default_factory=dict)
    tool_version: str = ""
    wall_time_s: float = 0.0
    outputs: list = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def finish(self):
        self.wall_time_s = time.perf_counter() - self._t0
        return self

    def to_dict(self):
        return {
            "command": self.command,
            "model_file_hash": self.model_file_hash,
            "distribution": self.distribution,
            "config": self.config,
            "tool_version": self.tool_version,
            "wall_time_s": self.wall_time_s,
            "outputs": list(self.outputs),
        }

    def write(self, path=None):
        text = dumps(self.to_dict()) + "\n"
        if path is None:
            sys.stderr.write(text)
        else:
            write_text(path, text)
