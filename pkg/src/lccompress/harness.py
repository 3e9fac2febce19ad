"""Config parsing, datasets, versioned model/theta files and metrics logs.

Config files are INI-style (``[section]`` headers, ``key = value`` lines)
with sections ``task``, ``scheme``, ``lc``, ``train`` and ``run``. Unknown
sections or keys are rejected. Model and theta files are plain text with a
format line, ``version = 1`` and a header, followed by values written with
17 significant digits so every binary64 value reads back bit-exactly.

Metrics files hold one JSON object per line with the fields, in order:
k, mu, loss_w, loss_compressed, constraint_norm, lambda_norm,
lstep_iters_used, wallclock_ms.
"""

import configparser
import csv
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .compression import (
    FIXED_CODEBOOK,
    KINDS,
    CompressionScheme,
    LowRankParams,
    QuantParams,
    SignParams,
    SparseParams,
    TernaryParams,
)
from .errors import ConfigError, FormatError, UnsupportedVersionError
from .lc import LCConfig, MetricsRecord
from .model import FAMILIES, LEAST_SQUARES, LOGISTIC, MLP, LossTask, WeightVector

FORMAT_VERSION = 1
MODEL_FORMAT = "lccompress-model"
THETA_FORMAT = "lccompress-theta"
SYNTHETIC_KINDS = ("linear", "logistic", "mlp-teacher")
METRIC_FIELDS = tuple(MetricsRecord.field_names())


# -- config ------------------------------------------------------------------

@dataclass
class TaskSpec:
    family: str = LEAST_SQUARES
    data: str = "synthetic"
    synthetic: str = None
    n: int = 50
    d: int = 8
    noise: float = 0.1
    data_seed: int = 0
    target_column: str = "-1"
    mlp_hidden: int = 4
    n_classes: int = 3
    l2_reg: float = 0.0


@dataclass
class SchemeSpec:
    kind: str = None
    level: int = None
    codebook: tuple = None
    layer: str = None
    restarts: int = 10


@dataclass
class TrainSpec:
    max_iter: int = 20000
    grad_tol: float = 1e-8
    max_epochs: int = 500
    batch_size: int = None


@dataclass
class RunSpec:
    seed: int = 0
    out_dir: str = "out"
    reference: str = None
    rounds: int = 5
    lstep_budget: int = 100
    float_bits: int = 32


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    scheme: SchemeSpec = field(default_factory=SchemeSpec)
    lc: LCConfig = field(default_factory=LCConfig)
    train: TrainSpec = field(default_factory=TrainSpec)
    run: RunSpec = field(default_factory=RunSpec)

    def reference_path(self):
        return self.run.reference or os.path.join(self.run.out_dir, "reference.model")

    def build_scheme(self):
        s = self.scheme
        if s.kind is None:
            raise ConfigError("no compression scheme given ([scheme] kind)")
        kw = {"restarts": s.restarts, "seed": self.run.seed}
        if s.kind == FIXED_CODEBOOK:
            kw["codebook"] = s.codebook
        if s.layer is not None:
            kw["layer"] = s.layer
        return CompressionScheme.from_level(s.kind, s.level, **kw)


_SECTIONS = {"task": TaskSpec, "scheme": SchemeSpec, "lc": LCConfig, "train": TrainSpec, "run": RunSpec}
_OPTIONAL = {"mu0", "constraint_tol", "synthetic", "level", "codebook", "layer", "reference", "batch_size"}


def _field_types(cls):
    out = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        out[f.name] = t
    return out


def _convert(key, raw, kind):
    raw = raw.strip()
    if key in _OPTIONAL and raw.lower() in ("", "none", "auto"):
        return None
    if key == "codebook":
        return tuple(float(v) for v in re.split(r"[,\s]+", raw) if v)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _key_lines(text):
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines.setdefault((section, None), no)
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


def parse_config(text, source="<config>"):
    """Parse config text; every error names the offending line."""
    parser = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        what = f"key '{exc.option}'" if isinstance(exc, configparser.DuplicateOptionError) else "section"
        raise ConfigError(f"{source}:{exc.lineno}: duplicate {what} in [{exc.section}]") from None
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}:{lines.get((section, None), '?')}: unknown section [{section}]")
        types = _field_types(_SECTIONS[section])
        values[section] = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key), "?")
            if key not in types:
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]")
            try:
                values[section][key] = _convert(key, raw, types[key])
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {section}.{key}: {exc}") from None
    try:
        cfg = RunConfig(**{name: _SECTIONS[name](**values.get(name, {})) for name in _SECTIONS})
    except ConfigError as exc:
        # name the line of the field that failed validation when we can tell
        msg = str(exc)
        m = re.match(r"(\w+) must", msg)
        line = lines.get(("lc", m.group(1))) if m else None
        raise ConfigError(f"{source}:{line}: lc.{m.group(1)}: {msg}" if line else f"{source}: {msg}") from None
    validate_config(cfg, source, lines)
    return cfg


def validate_config(cfg, source="<config>", lines=None):
    lines = lines or {}

    def fail(section, key, msg):
        line = lines.get((section, key))
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {section}.{key}: {msg}")

    t = cfg.task
    if t.family not in FAMILIES:
        fail("task", "family", f"expected one of {FAMILIES}, got {t.family!r}")
    if t.data == "synthetic":
        if t.synthetic is not None and t.synthetic not in SYNTHETIC_KINDS:
            fail("task", "synthetic", f"expected one of {SYNTHETIC_KINDS}")
        if t.n < 1:
            fail("task", "n", "must be >= 1")
        if t.d < 1:
            fail("task", "d", "must be >= 1")
        if t.noise < 0:
            fail("task", "noise", "must be >= 0")
    if t.mlp_hidden < 1:
        fail("task", "mlp_hidden", "must be >= 1")
    if t.n_classes < 2:
        fail("task", "n_classes", "must be >= 2")
    if t.l2_reg < 0:
        fail("task", "l2_reg", "must be >= 0")
    s = cfg.scheme
    if s.kind is not None and s.kind not in KINDS:
        fail("scheme", "kind", f"expected one of {KINDS}, got {s.kind!r}")
    if s.level is not None and s.level < 1:
        fail("scheme", "level", "must be >= 1")
    if s.restarts < 1:
        fail("scheme", "restarts", "must be >= 1")
    tr = cfg.train
    if tr.max_iter < 1 or tr.max_epochs < 1:
        fail("train", "max_iter", "iteration budgets must be >= 1")
    if not tr.grad_tol > 0:
        fail("train", "grad_tol", "must be > 0")
    r = cfg.run
    if r.rounds < 1:
        fail("run", "rounds", "must be >= 1")
    if r.lstep_budget < 1:
        fail("run", "lstep_budget", "must be >= 1")
    if not r.out_dir:
        fail("run", "out_dir", "must not be empty")
    if r.float_bits < 1:
        fail("run", "float_bits", "must be >= 1")
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def default_config():
    return RunConfig()


def config_to_text(cfg):
    """Render a config back to INI text (None values are left empty)."""
    out = []
    for name in _SECTIONS:
        out.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            if value is None:
                value = ""
            elif isinstance(value, (tuple, list)):
                value = ", ".join(repr(float(v)) for v in value)
            out.append(f"{key} = {value}")
        out.append("")
    return "\n".join(out)


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    kind: str = "csv"
    true_weights: dict = None


def load_csv(path, target_column=-1):
    """Read a numeric CSV with a header row.

    ``target_column`` is a header name or an integer position (negative counts
    from the end). Errors report the 1-based file line, the header being line 1.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise FormatError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    ncol = len(header)
    if isinstance(target_column, str) and target_column.lstrip("-").isdigit():
        target_column = int(target_column)
    if isinstance(target_column, str):
        if target_column not in header:
            raise FormatError(f"{path}: no column named {target_column!r}")
        tcol = header.index(target_column)
    else:
        tcol = int(target_column)
        if not -ncol <= tcol < ncol:
            raise FormatError(f"{path}: target column {tcol} out of range for {ncol} columns")
        tcol %= ncol
    if ncol < 2:
        raise FormatError(f"{path}: need at least one feature column and a target column")
    data = []
    for line_no, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != ncol:
            raise FormatError(f"{path}: row {line_no} has {len(row)} fields, expected {ncol}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            bad = next(c for c in row if not _is_float(c))
            raise FormatError(f"{path}: row {line_no}: non-numeric value {bad!r}") from None
        if not all(np.isfinite(vals)):
            raise FormatError(f"{path}: row {line_no}: missing or non-finite value")
        data.append(vals)
    if not data:
        raise FormatError(f"{path}: empty dataset (header only)")
    arr = np.array(data)
    return np.delete(arr, tcol, axis=1), arr[:, tcol]


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def gen_synthetic(kind, N, D, noise, seed, n_classes=3, hidden=4):
    """Reproducible synthetic regression/classification data.

    The generating weights are kept in ``true_weights``. For ``logistic`` and
    ``mlp-teacher`` the noise is added to the scores before thresholding.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if N < 1 or D < 1:
        raise ConfigError("N and D must be >= 1")
    if noise < 0:
        raise ConfigError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, D))
    if kind in ("linear", "logistic"):
        w = rng.standard_normal(D)
        b = float(rng.standard_normal())
        z = X @ w + b + noise * rng.standard_normal(N)
        y = z if kind == "linear" else (z > 0).astype(np.float64)
        return Dataset(X, y, kind, {"weights": w, "bias": b})
    W1 = rng.standard_normal((hidden, D)) / np.sqrt(D)
    b1 = 0.1 * rng.standard_normal(hidden)
    W2 = rng.standard_normal((n_classes, hidden))
    b2 = 0.1 * rng.standard_normal(n_classes)
    scores = np.tanh(X @ W1.T + b1) @ W2.T + b2 + noise * rng.standard_normal((N, n_classes))
    y = np.argmax(scores, axis=1).astype(np.float64)
    return Dataset(X, y, kind, {"W1": W1, "b1": b1, "W2": W2, "b2": b2})


_FAMILY_SYNTHETIC = {LEAST_SQUARES: "linear", LOGISTIC: "logistic", MLP: "mlp-teacher"}


def build_task(spec, base_dir="."):
    """LossTask from a ``[task]`` spec: a CSV path or ``synthetic``."""
    if spec.data == "synthetic":
        kind = spec.synthetic or _FAMILY_SYNTHETIC[spec.family]
        ds = gen_synthetic(kind, spec.n, spec.d, spec.noise, spec.data_seed,
                           n_classes=spec.n_classes, hidden=spec.mlp_hidden)
        X, y = ds.inputs, ds.targets
    else:
        path = spec.data if os.path.isabs(spec.data) else os.path.join(base_dir, spec.data)
        X, y = load_csv(path, spec.target_column)
    n_classes = spec.n_classes if spec.family == MLP else None
    if n_classes is not None and y.size and int(np.max(y)) + 1 > n_classes:
        n_classes = None
    return LossTask(spec.family, X, y, mlp_hidden=spec.mlp_hidden if spec.family == MLP else None,
                    l2_reg=spec.l2_reg, n_classes=n_classes)


# -- model / theta files -----------------------------------------------------

def _fmt(v):
    return format(float(v), ".17g")


def _layout_text(layout):
    return ";".join(f"{name}:{'x'.join(str(s) for s in shape)}" for name, shape in layout)


def _parse_layout(text):
    out = []
    for part in text.split(";"):
        name, shape = part.rsplit(":", 1)
        out.append((name, tuple(int(s) for s in shape.split("x"))))
    return out


def _read_header(path, expected_format):
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    if not lines or lines[0].strip() != expected_format:
        raise FormatError(f"{path}: not a {expected_format} file")
    header, body = {}, []
    for i, line in enumerate(lines[1:], 2):
        if line.strip() == "---":
            body = lines[i:]
            break
        if "=" not in line:
            raise FormatError(f"{path}:{i}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    else:
        raise FormatError(f"{path}: missing '---' separator")
    version = header.get("version")
    if version != str(FORMAT_VERSION):
        raise UnsupportedVersionError(
            f"{path}: unsupported format version {version!r}; this reader handles version {FORMAT_VERSION}"
        )
    return header, body


def _write(path, text):
    if not path:
        raise FormatError("empty output path")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror}") from None


def save_model(path, w, family=None):
    lines = [
        MODEL_FORMAT,
        f"version = {FORMAT_VERSION}",
        f"family = {family or ''}",
        f"layout = {_layout_text(w.layout)}",
        f"mask = {''.join('1' if m else '0' for m in w.compress_mask)}",
        f"size = {w.size}",
        "---",
    ]
    lines.extend(_fmt(v) for v in w.values)
    _write(path, "\n".join(lines) + "\n")


def load_model(path, with_family=False):
    header, body = _read_header(path, MODEL_FORMAT)
    try:
        layout = _parse_layout(header["layout"])
        mask = np.array([c == "1" for c in header["mask"]], dtype=bool)
        size = int(header["size"])
        values = np.array([float(v) for v in body if v.strip()])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed model file ({exc})") from None
    if values.size != size or mask.size != size:
        raise FormatError(f"{path}: expected {size} values and mask entries")
    w = WeightVector(values, layout, mask)
    return (w, header.get("family") or None) if with_family else w


def _array_line(name, arr):
    arr = np.asarray(arr)
    shape = "x".join(str(s) for s in arr.shape)
    vals = " ".join(str(int(v)) if arr.dtype.kind in "iu" else _fmt(v) for v in arr.ravel())
    return f"{name} {shape}: {vals}"


_THETA_FIELDS = {
    QuantParams: ("codebook", "assign"),
    SignParams: ("signs",),
    TernaryParams: ("levels",),
    LowRankParams: ("U", "V"),
    SparseParams: ("support", "vals"),
}


def save_theta(path, theta, scheme=None):
    cls = type(theta)
    if cls not in _THETA_FIELDS:
        raise ConfigError(f"cannot serialize {cls.__name__}")
    lines = [THETA_FORMAT, f"version = {FORMAT_VERSION}", f"params = {cls.__name__}"]
    if scheme is not None:
        lines.append(f"scheme = {scheme.kind}")
    if isinstance(theta, SparseParams) and theta.size is not None:
        lines.append(f"size = {theta.size}")
    lines.append("---")
    lines.extend(_array_line(name, getattr(theta, name)) for name in _THETA_FIELDS[cls])
    _write(path, "\n".join(lines) + "\n")


def load_theta(path):
    header, body = _read_header(path, THETA_FORMAT)
    by_name = {c.__name__: c for c in _THETA_FIELDS}
    cls = by_name.get(header.get("params"))
    if cls is None:
        raise FormatError(f"{path}: unknown parameter type {header.get('params')!r}")
    arrays = {}
    for line in body:
        if not line.strip():
            continue
        try:
            head, vals = line.split(":", 1)
            name, shape = head.split()
            shape = tuple(int(s) for s in shape.split("x")) if shape else (0,)
            dtype = np.int64 if name in ("assign", "signs", "levels", "support") else np.float64
            arr = np.array([float(v) for v in vals.split()], dtype=np.float64)
            arrays[name] = arr.astype(dtype).reshape(shape)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed line {line[:40]!r} ({exc})") from None
    missing = [n for n in _THETA_FIELDS[cls] if n not in arrays]
    if missing:
        raise FormatError(f"{path}: missing fields {missing}")
    kwargs = {n: arrays[n] for n in _THETA_FIELDS[cls]}
    if cls is SparseParams and "size" in header:
        kwargs["size"] = int(header["size"])
    return cls(**kwargs)


# -- metrics -----------------------------------------------------------------

def metrics_line(record):
    return json.dumps({name: getattr(record, name) for name in METRIC_FIELDS})


def append_metrics(path, record):
    if not path:
        raise FormatError("empty metrics path")
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(metrics_line(record) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot append to {path}: {exc.strerror}") from None


def read_metrics(path):
    """Parse a metrics file back into MetricsRecord objects."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from None
    out = []
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if list(obj) != list(METRIC_FIELDS):
                raise ValueError("unexpected fields")
            out.append(MetricsRecord(**obj))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{no}: bad metrics record ({exc})") from None
    return out
