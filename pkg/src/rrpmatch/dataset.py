"""Treated/control samples: schema, CSV loading, bundled NSW files, naive target."""

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import EmptyGroup, MissingColumn, SchemaMismatch, UnparseableValue

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
BINARY = "binary"
KINDS = (CONTINUOUS, CATEGORICAL, BINARY)


@dataclass(frozen=True)
class CovariateSchema:
    """Column layout of a sample.

    Parameters
    ----------
    columns : sequence of (name, kind)
        Covariates in order; ``kind`` is one of ``continuous``, ``categorical``
        or ``binary``.
    outcome_column, treatment_column : str
        Names of the realized outcome and of the 0/1 treatment indicator.
    """

    columns: tuple
    outcome_column: str = "re78"
    treatment_column: str = "treat"

    def __post_init__(self):
        cols = tuple((str(n), str(k)) for n, k in self.columns)
        object.__setattr__(self, "columns", cols)
        if not cols:
            raise SchemaMismatch("schema needs at least one covariate column")
        names = [n for n, _ in cols]
        if len(set(names)) != len(names):
            raise SchemaMismatch("duplicate covariate names")
        for n, k in cols:
            if k not in KINDS:
                raise SchemaMismatch(f"unknown covariate kind {k!r} for {n!r}")
        if self.outcome_column == self.treatment_column:
            raise SchemaMismatch("outcome and treatment columns must differ")
        for special in (self.outcome_column, self.treatment_column):
            if special in names:
                raise SchemaMismatch(f"{special!r} cannot also be a covariate")

    @property
    def names(self):
        return [n for n, _ in self.columns]

    @property
    def kinds(self):
        return [k for _, k in self.columns]

    def to_dict(self):
        return {
            "outcome": self.outcome_column,
            "treatment": self.treatment_column,
            "covariates": [{"name": n, "kind": k} for n, k in self.columns],
        }

    @classmethod
    def from_dict(cls, d):
        cov = [(c["name"], c.get("kind", CONTINUOUS)) for c in d["covariates"]]
        return cls(tuple(cov), d.get("outcome", "re78"), d.get("treatment", "treat"))

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


LALONDE_SCHEMA = CovariateSchema(
    columns=(
        ("age", CONTINUOUS),
        ("education", CONTINUOUS),
        ("black", BINARY),
        ("hispanic", BINARY),
        ("married", BINARY),
        ("nodegree", BINARY),
        ("re74", CONTINUOUS),
        ("re75", CONTINUOUS),
    ),
    outcome_column="re78",
    treatment_column="treat",
)

SCHEMAS = {"lalonde": LALONDE_SCHEMA}


def get_schema(selector):
    """Resolve a schema from a registered name or a JSON file path."""
    if isinstance(selector, CovariateSchema):
        return selector
    if selector is None:
        return LALONDE_SCHEMA
    if selector in SCHEMAS:
        return SCHEMAS[selector]
    return CovariateSchema.from_json(selector)


@dataclass(frozen=True)
class Unit:
    id: int
    outcome: float
    treated: bool
    covariates: tuple  # None marks a missing value


@dataclass(frozen=True, eq=False)
class Sample:
    """Immutable treated/control sample backed by numpy arrays.

    Covariates live in ``X`` as floats with NaN for missing cells; categorical
    columns hold integer codes into ``categories[j]``.
    """

    schema: CovariateSchema
    X: np.ndarray
    y: np.ndarray
    treated: np.ndarray
    categories: tuple = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.treated).astype(bool)
        if X.ndim != 2 or X.shape[1] != len(self.schema.columns):
            raise SchemaMismatch("covariate matrix does not match schema")
        if not (len(X) == len(y) == len(t)):
            raise SchemaMismatch("covariates, outcome and treatment lengths differ")
        if not np.all(np.isfinite(y)):
            raise SchemaMismatch("outcomes must be finite")
        cats = self.categories
        if cats is None:
            cats = tuple(None for _ in self.schema.columns)
        for arr in (X, y, t):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "treated", t)
        object.__setattr__(self, "categories", tuple(cats))
        if self.n_T < 1 or self.n_C < 1:
            raise EmptyGroup(f"sample needs treated and controls (n_T={self.n_T}, n_C={self.n_C})")

    @property
    def n_T(self):
        return int(self.treated.sum())

    @property
    def n_C(self):
        return int(len(self.treated) - self.treated.sum())

    def __len__(self):
        return len(self.y)

    @property
    def kinds(self):
        return self.schema.kinds

    @property
    def X_treated(self):
        return self.X[self.treated]

    @property
    def X_control(self):
        return self.X[~self.treated]

    @property
    def y_treated(self):
        return self.y[self.treated]

    @property
    def y_control(self):
        return self.y[~self.treated]

    @property
    def units(self):
        out = []
        for i in range(len(self.y)):
            cov = []
            for j, v in enumerate(self.X[i]):
                if math.isnan(v):
                    cov.append(None)
                elif self.categories[j] is not None:
                    cov.append(self.categories[j][int(v)])
                else:
                    cov.append(float(v))
            out.append(Unit(i, float(self.y[i]), bool(self.treated[i]), tuple(cov)))
        return out

    def with_controls(self, other):
        """Treated units of this sample paired with the controls of ``other``."""
        if other.schema.names != self.schema.names:
            raise SchemaMismatch("samples have different covariates")
        if other.categories != self.categories:
            raise SchemaMismatch("categorical label sets differ; use combine_files")
        X =np.vstack([self.X_treated, other.X_control])
        y = np.concatenate([self.y_treated, other.y_control])
        t = np.r_[np.ones(self.n_T, bool), np.zeros(other.n_C, bool)]
        return Sample(self.schema, X, y, t, self.categories)

    def swapped(self):
        """Same sample with the treatment flag inverted."""
        return Sample(self.schema, self.X, self.y, ~self.treated, self.categories)


def _parse_float(text, row, column):
    try:
        v = float(text)
    except ValueError:
        raise UnparseableValue(row, column, text) from None
    if not math.isfinite(v):
        raise UnparseableValue(row, column, text)
    return v


def _parse_treatment(text, row, column):
    s = text.strip().lower()
    if s in ("1", "1.0", "true", "t", "yes"):
        return True
    if s in ("0", "0.0", "false", "f", "no"):
        return False
    raise UnparseableValue(row, column, text)


def _read_rows(path, schema):
    """Parse a CSV file into raw covariate rows, outcomes and treatment flags."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(schema.treatment_column) from None
        pos = {name: i for i, name in enumerate(header)}
        for name in [schema.treatment_column, schema.outcome_column] + schema.names:
            if name not in pos:
                raise MissingColumn(name)

        kinds = schema.kinds
        rows, ys, ts = [], [], []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) < len(header):
                rec = rec + [""] * (len(header) - len(rec))
            tcell = rec[pos[schema.treatment_column]]
            ycell = rec[pos[schema.outcome_column]]
            if not tcell.strip():
                raise UnparseableValue(r, schema.treatment_column, tcell)
            if not ycell.strip():
                raise UnparseableValue(r, schema.outcome_column, ycell)
            ts.append(_parse_treatment(tcell, r, schema.treatment_column))
            ys.append(_parse_float(ycell, r, schema.outcome_column))
            row = []
            for name, kind in zip(schema.names, kinds):
                cell = rec[pos[name]].strip()
                if cell == "":
                    row.append(None)
                elif kind == CATEGORICAL:
                    row.append(cell)
                else:
                    v = _parse_float(cell, r, name)
                    if kind == BINARY and v not in (0.0, 1.0):
                        raise UnparseableValue(r, name, cell)
                    row.append(v)
            rows.append(row)
    return rows, ys, ts


def _build(schema, rows, ys, ts, source="sample"):
    X, categories = _encode(rows, schema.kinds)
    t = np.array(ts, dtype=bool)
    if t.sum() == 0 or (~t).sum() == 0:
        raise EmptyGroup(f"{source}: need at least one treated and one control row")
    return Sample(schema, X, np.array(ys, dtype=float), t, categories)


def load_sample(path, schema=LALONDE_SCHEMA):
    """Read a CSV file into a :class:`Sample`.

    Empty covariate cells become missing values; an empty outcome or
    treatment cell is an error. Row numbers in errors are 1-based data rows.
    """
    schema = get_schema(schema)
    rows, ys, ts = _read_rows(path, schema)
    return _build(schema, rows, ys, ts, str(path))


def combine_files(treated_path, controls_path, schema=LALONDE_SCHEMA):
    """Treated rows of one file joined with the control rows of another."""
    schema = get_schema(schema)
    rt, yt, tt = _read_rows(treated_path, schema)
    rc, yc, tc = _read_rows(controls_path, schema)
    keep_t = [i for i, flag in enumerate(tt) if flag]
    keep_c = [i for i, flag in enumerate(tc) if not flag]
    rows = [rt[i] for i in keep_t] + [rc[i] for i in keep_c]
    ys = [yt[i] for i in keep_t] + [yc[i] for i in keep_c]
    ts = [True] * len(keep_t) + [False] * len(keep_c)
    return _build(schema, rows, ys, ts, f"{treated_path} + {controls_path}")


def _encode(rows, kinds):
    n, p = len(rows), len(kinds)
    X = np.full((n, p), np.nan)
    categories = []
    for j, kind in enumerate(kinds):
        col = [row[j] for row in rows]
        if kind == CATEGORICAL:
            labels = tuple(sorted({v for v in col if v is not None}))
            code = {lab: k for k, lab in enumerate(labels)}
            X[:, j] = [np.nan if v is None else code[v] for v in col]
            categories.append(labels)
        else:
            X[:, j] = [np.nan if v is None else v for v in col]
            categories.append(None)
    return X, tuple(categories)


def _format(v):
    return repr(float(v)) if float(v) != int(v) else str(int(v))


def save_sample(sample, path):
    """Write a sample back to CSV (missing covariates as empty cells)."""
    schema = sample.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.treatment_column, schema.outcome_column] + schema.names)
        for i in range(len(sample)):
            row = [int(sample.treated[i]), _format(sample.y[i])]
            for j, v in enumerate(sample.X[i]):
                if math.isnan(v):
                    row.append("")
                elif sample.categories[j] is not None:
                    row.append(sample.categories[j][int(v)])
                else:
                    row.append(_format(v))
            w.writerow(row)


def naive_target(sample):
    """Difference in mean outcomes and its standard error.

    The standard error is ``sqrt(s_T^2/n_T + s_C^2/n_C)`` with unbiased
    group variances.
    """
    yt, yc = sample.y_treated, sample.y_control
    if len(yt) < 2 or len(yc) < 2:
        raise EmptyGroup("naive target needs at least two treated and two controls")
    att = yt.mean() - yc.mean()
    se = math.sqrt(yt.var(ddof=1) / len(yt) + yc.var(ddof=1) / len(yc))
    return float(att), se


def pooled_sd(sample):
    """Pooled within-group standard deviation of the outcome."""
    yt, yc = sample.y_treated, sample.y_control
    nt, nc = len(yt), len(yc)
    return math.sqrt(((nt - 1) * yt.var(ddof=1) + (nc - 1) * yc.var(ddof=1)) / (nt + nc - 2))


# -- bundled files -----------------------------------------------------------

def _data_dir():
    return Path(str(resources.files("rrpmatch") / "data"))


def bundled_manifest():
    """Parse ``data/manifest.txt`` into ``{name: (filename, n_treated, n_control)}``."""
    out = {}
    text = (_data_dir() / "manifest.txt").read_text(encoding="utf-8")
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, fname, nt, nc = line.split()
        out[name] = (fname, int(nt), int(nc))
    return out


def bundled_path(name):
    fname, _, _ = bundled_manifest()[name.upper()]
    return _data_dir() / fname


def load_bundled(name, schema=LALONDE_SCHEMA, check=True):
    """Load a bundled NSW sample by name.

    ``LL``, ``DW`` and ``ST`` are the experimental samples. ``DWvsPSID`` (any
    ``<X>vsPSID``) pairs the treated of ``<X>`` with the 2490 PSID controls.
    """
    manifest = bundled_manifest()
    key = name.upper()
    if key.endswith("VSPSID"):
        base = key[: -len("VSPSID")]
        sample = combine_files(_existing(base), _existing("PSID"), schema)
        if check:
            _check_counts(sample, manifest[base][1], manifest["PSID"][2], name)
        return sample
    sample = load_sample(_existing(key), schema)
    if check:
        _check_counts(sample, manifest[key][1], manifest[key][2], name)
    return sample


def _existing(key):
    manifest = bundled_manifest()
    if key not in manifest:
        raise KeyError(f"unknown bundled sample {key!r}; known: {sorted(manifest)}")
    path = bundled_path(key)
    if not path.exists():
        raise FileNotFoundError(f"bundled sample {key} is not available ({path})")
    return path


def _check_counts(sample, nt, nc, name):
    if (sample.n_T, sample.n_C) != (nt, nc):
        raise SchemaMismatch(
            f"{name}: expected {nt}+{nc} rows, found {sample.n_T}+{sample.n_C}")


def _resolve_path(spec):
    p = Path(str(spec))
    if p.suffix.lower() == ".csv" or p.exists():
        return p
    return _existing(str(spec).upper())


def resolve_sample(spec, schema=LALONDE_SCHEMA, controls=None):
    """Load ``spec`` (bundled name or CSV path), optionally taking controls elsewhere."""
    if controls is None:
        key = str(spec).upper()
        if not Path(str(spec)).exists() and key.endswith("VSPSID"):
            return load_bundled(key, schema)
        return load_sample(_resolve_path(spec), schema)
    return combine_files(_resolve_path(spec), _resolve_path(controls), schema)
