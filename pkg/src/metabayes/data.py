"""Meta-analysis dataset handling.

Datasets are ingested from CSV in either a wide (one study per row, arm
values in prefixed column groups such as ``r1, r2, ...``) or a long (one
arm per row) format, validated, and normalised to the long form used by
the model code.  The two migraine-prophylaxis example datasets ship with
the package.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence


class Endpoint(str, Enum):
    """Outcome type; fixes the likelihood/link pairing downstream."""

    BINARY = "binary"
    CONTINUOUS = "continuous"
    COUNT = "count"


#: Column roles required per endpoint (names as used in long-format CSV).
ENDPOINT_ROLES: dict[Endpoint, tuple[str, ...]] = {
    Endpoint.BINARY: ("responders", "sampleSize"),
    Endpoint.CONTINUOUS: ("mean", "std_err"),
    Endpoint.COUNT: ("count", "exposure"),
}

#: Column order of the long-format CSV interchange files.
LONG_COLUMNS = (
    "study",
    "arm",
    "dose",
    "responders",
    "sampleSize",
    "mean",
    "std_err",
    "count",
    "exposure",
)

# role name -> ArmRecord attribute
_ROLE_ATTR = {
    "dose": "dose",
    "responders": "responders",
    "sampleSize": "sample_size",
    "mean": "mean",
    "std_err": "std_err",
    "count": "events",
    "exposure": "exposure",
}

# accepted aliases for role names (R-style column naming)
_ROLE_ALIASES = {"std.err": "std_err"}


class DataError(ValueError):
    """Invalid or inconsistent meta-analysis data."""


def _canon_role(role: str) -> str:
    role = _ROLE_ALIASES.get(role, role)
    if role not in _ROLE_ATTR:
        raise DataError(f"unknown arm variable role '{role}'")
    return role


@dataclass(frozen=True)
class ArmRecord:
    """One study arm in long format.

    ``arm`` 0 is the control/placebo arm.  Exactly one outcome variant
    (responders/sample_size, mean/std_err, or events/exposure) should be
    populated, matching the dataset endpoint.
    """

    study: int
    arm: int
    dose: float | None = None
    responders: int | None = None
    sample_size: int | None = None
    mean: float | None = None
    std_err: float | None = None
    events: int | None = None
    exposure: float | None = None

    def __post_init__(self) -> None:
        if self.study < 1:
            raise DataError(f"study index must be >= 1, got {self.study}")
        if self.arm < 0:
            raise DataError(f"arm index must be >= 0, got {self.arm}")
        if self.dose is not None and self.dose < 0:
            raise DataError(f"study {self.study}: dose must be non-negative")
        if self.responders is not None:
            if self.sample_size is None or self.sample_size < 1:
                raise DataError(f"study {self.study}: sampleSize must be >= 1")
            if self.responders < 0:
                raise DataError(f"study {self.study}: responders must be >= 0")
            if self.responders > self.sample_size:
                raise DataError(
                    f"study {self.study}: responders ({self.responders}) exceed "
                    f"sampleSize ({self.sample_size})"
                )
        if self.std_err is not None and self.std_err <= 0:
            raise DataError(f"study {self.study}: std_err must be > 0")
        if self.events is not None and self.events < 0:
            raise DataError(f"study {self.study}: count must be >= 0")
        if self.exposure is not None and self.exposure <= 0:
            raise DataError(f"study {self.study}: exposure must be > 0")

    def outcome_roles(self) -> tuple[str, ...]:
        """Long-format roles populated on this record (dose excluded)."""
        out = []
        for role, attr in _ROLE_ATTR.items():
            if role != "dose" and getattr(self, attr) is not None:
                out.append(role)
        return tuple(out)


@dataclass(frozen=True)
class Dataset:
    """Long-format meta-analysis dataset.

    Study indices are contiguous 1..n_studies and every study carries at
    least two arms with distinct, gap-free arm indices starting at 0.
    Study labels and study-level covariate columns (e.g. follow-up
    duration) may ride along for reporting and meta-regression.
    """

    endpoint: Endpoint
    arms: tuple[ArmRecord, ...]
    study_labels: tuple[str, ...] | None = None
    covariates: Mapping[str, tuple] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "arms", tuple(self.arms))
        self._validate()

    # -- derived shape ---------------------------------------------------

    @property
    def n_studies(self) -> int:
        return max((a.study for a in self.arms), default=0)

    @property
    def arms_per_study(self) -> tuple[int, ...]:
        counts = [0] * self.n_studies
        for a in self.arms:
            counts[a.study - 1] += 1
        return tuple(counts)

    @property
    def has_doses(self) -> bool:
        return bool(self.arms) and all(a.dose is not None for a in self.arms)

    def study_arms(self, study: int) -> tuple[ArmRecord, ...]:
        """Arms of one study, ordered by arm index."""
        got = sorted((a for a in self.arms if a.study == study), key=lambda a: a.arm)
        if not got:
            raise DataError(f"no such study: {study}")
        return tuple(got)

    # -- validation ------------------------------------------------------

    def _validate(self) -> None:
        if not self.arms:
            if self.study_labels or self.covariates:
                raise DataError("labels/covariates supplied for an empty dataset")
            return
        required = set(ENDPOINT_ROLES[self.endpoint])
        studies = sorted({a.study for a in self.arms})
        if studies != list(range(1, len(studies) + 1)):
            raise DataError(f"study indices must be contiguous 1..k, got {studies}")
        for s in studies:
            arms = sorted((a for a in self.arms if a.study == s), key=lambda a: a.arm)
            idx = [a.arm for a in arms]
            if len(set(idx)) != len(idx):
                raise DataError(f"study {s}: duplicate arm indices {idx}")
            if idx != list(range(len(idx))):
                raise DataError(f"study {s}: arm indices must be 0..T-1, got {idx}")
            if len(arms) < 2:
                raise DataError(f"study {s}: needs at least 2 arms")
            for a in arms:
                if set(a.outcome_roles()) != required:
                    raise DataError(
                        f"study {s} arm {a.arm}: outcome fields {a.outcome_roles()} "
                        f"do not match endpoint '{self.endpoint.value}'"
                    )
        doses = [a.dose is not None for a in self.arms]
        if any(doses) and not all(doses):
            raise DataError("doses must be given on every arm or on none")
        if all(doses):
            for a in self.arms:
                if a.arm == 0 and a.dose != 0:
                    raise DataError(
                        f"study {a.study}: control arm must have dose 0, got {a.dose}"
                    )
        k = self.n_studies
        if self.study_labels is not None and len(self.study_labels) != k:
            raise DataError("study_labels length must equal the number of studies")
        if self.covariates is not None:
            for name, col in self.covariates.items():
                if len(col) != k:
                    raise DataError(f"covariate '{name}' must have one value per study")


@dataclass(frozen=True)
class WideTable:
    """One-study-per-row table with per-arm column groups (``r1, r2, ...``)."""

    columns: tuple[str, ...]
    rows: tuple[Mapping[str, object], ...]
    n_arms_column: str | None = None

    def arm_columns(self, prefix: str) -> tuple[str, ...]:
        """Columns named ``prefix<i>``, ordered by the integer suffix."""
        found = []
        for c in self.columns:
            if c.startswith(prefix) and c[len(prefix):].isdigit():
                found.append((int(c[len(prefix):]), c))
        if not found:
            raise DataError(f"no columns with prefix '{prefix}'")
        return tuple(c for _, c in sorted(found))

    def column(self, name: str) -> tuple:
        if name not in self.columns:
            raise DataError(f"no such column: '{name}'")
        return tuple(r[name] for r in self.rows)


# ---------------------------------------------------------------------------
# CSV parsing
# ---------------------------------------------------------------------------


def _coerce(value: str, kind: str, column: str, row: int):
    value = value.strip()
    if value == "":
        return None
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise DataError(
            f"column '{column}', row {row}: expected {kind}, got '{value}'"
        ) from None
    return value


def _auto_coerce(value: str):
    value = value.strip()
    if value == "":
        return None
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def _read_csv_text(path_or_text: str | os.PathLike) -> str:
    """Treat multi-line strings as CSV text, everything else as a path."""
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        return path_or_text
    with open(path_or_text, "r", encoding="utf-8", newline="") as fh:
        return fh.read()


def parse_csv(
    path_or_text: str | os.PathLike,
    schema: Mapping[str, str] | None = None,
    n_arms_column: str | None = None,
) -> WideTable:
    """Parse a comma-separated table (header required, ``.`` decimals, UTF-8).

    ``schema`` optionally maps column names to ``"int"``, ``"float"`` or
    ``"text"``; unlisted columns are auto-typed.  Blank cells become
    ``None`` (absent arms in unbalanced multi-dose tables).
    """
    text = _read_csv_text(path_or_text)
    reader = csv.reader(io.StringIO(text))
    try:
        rows = list(reader)
    except csv.Error as exc:
        raise DataError(f"malformed CSV near row {reader.line_num}: {exc}") from None
    if not rows:
        raise DataError("empty CSV: header row required")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header")
    schema = dict(schema or {})
    for name in schema:
        if name not in header:
            raise DataError(f"schema column '{name}' not found in header {header}")
    if n_arms_column is not None and n_arms_column not in header:
        raise DataError(f"n_arms column '{n_arms_column}' not found in header")

    records = []
    for irow, raw in enumerate(rows[1:], start=1):
        if not any(cell.strip() for cell in raw):
            continue  # skip fully blank lines
        if len(raw) > len(header):
            raise DataError(
                f"row {irow}: {len(raw)} cells but header has {len(header)} columns"
            )
        raw = list(raw) + [""] * (len(header) - len(raw))
        rec = {}
        for col, cell in zip(header, raw):
            if col in schema and schema[col] != "text":
                rec[col] = _coerce(cell, schema[col], col, irow)
            else:
                rec[col] = _auto_coerce(cell)
        records.append(rec)
    return WideTable(columns=tuple(header), rows=tuple(records), n_arms_column=n_arms_column)


# ---------------------------------------------------------------------------
# Wide -> long conversion
# ---------------------------------------------------------------------------


def _as_count(value, what: str, study: int) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value == int(value):
        return int(value)
    raise DataError(f"study {study}: {what} must be an integer, got {value!r}")


def convert_wide_to_long(
    wide: WideTable,
    arm_vars: Mapping[str, str],
    endpoint: Endpoint | str,
    label_column: str | None = None,
    covariate_columns: Sequence[str] = (),
) -> Dataset:
    """Convert a one-study-per-row table to a one-arm-per-row :class:`Dataset`.

    ``arm_vars`` maps roles to column prefixes, e.g.
    ``{"responders": "r", "sampleSize": "n"}``; a ``dose`` role marks a
    dose-response table.  Blank arm cells are skipped.  Study order is the
    input row order; when doses are present the dose-0 arm becomes arm 0.
    """
    endpoint = Endpoint(endpoint)
    roles = {_canon_role(role): prefix for role, prefix in arm_vars.items()}
    for role in ENDPOINT_ROLES[endpoint]:
        if role not in roles:
            raise DataError(
                f"endpoint '{endpoint.value}' requires arm variable '{role}'"
            )
    extra = set(roles) - set(ENDPOINT_ROLES[endpoint]) - {"dose"}
    if extra:
        raise DataError(f"arm variables {sorted(extra)} do not apply to endpoint '{endpoint.value}'")

    cols = {role: wide.arm_columns(prefix) for role, prefix in roles.items()}
    counts = {role: len(c) for role, c in cols.items()}
    if len(set(counts.values())) > 1:
        raise DataError(f"arm column groups differ in size: {counts}")
    n_slots = next(iter(counts.values()))
    with_dose = "dose" in roles

    arms: list[ArmRecord] = []
    for irow, row in enumerate(wide.rows):
        study = irow + 1
        collected = []
        for slot in range(n_slots):
            cells = {role: row[cols[role][slot]] for role in roles}
            present = [v is not None for v in cells.values()]
            if not any(present):
                continue
            if not all(present):
                missing = [r for r, v in cells.items() if v is None]
                raise DataError(
                    f"study {study}: arm {slot + 1} is missing {missing}"
                )
            collected.append(cells)
        if wide.n_arms_column is not None:
            declared = row[wide.n_arms_column]
            if declared is not None and declared != len(collected):
                raise DataError(
                    f"study {study}: {wide.n_arms_column}={declared} but "
                    f"{len(collected)} arms have values"
                )
        if with_dose:
            collected.sort(key=lambda c: 0 if c["dose"] == 0 else 1)
            if collected and collected[0]["dose"] != 0:
                raise DataError(f"study {study}: no dose-0 (control) arm")
        for j, cells in enumerate(collected):
            kwargs: dict = {"study": study, "arm": j}
            for role, value in cells.items():
                attr = _ROLE_ATTR[role]
                if role in ("responders", "sampleSize", "count"):
                    value = _as_count(value, role, study)
                else:
                    value = float(value)
                kwargs[attr] = value
            arms.append(ArmRecord(**kwargs))

    labels = None
    if label_column is not None:
        labels = tuple(str(v) for v in wide.column(label_column))
    covs = None
    if covariate_columns:
        covs = {name: wide.column(name) for name in covariate_columns}
    if not arms:
        return Dataset(endpoint=endpoint, arms=())
    return Dataset(endpoint=endpoint, arms=tuple(arms), study_labels=labels, covariates=covs)


# ---------------------------------------------------------------------------
# Long-format CSV interchange
# ---------------------------------------------------------------------------


def write_long_csv(dataset: Dataset) -> str:
    """Render a dataset as long-format CSV (blank cells for unused roles)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(LONG_COLUMNS)
    for a in sorted(dataset.arms, key=lambda a: (a.study, a.arm)):
        row = [a.study, a.arm]
        for role in LONG_COLUMNS[2:]:
            value = getattr(a, _ROLE_ATTR[role])
            if value is None:
                row.append("")
            elif isinstance(value, float):
                row.append(format(value, "g"))
            else:
                row.append(value)
        writer.writerow(row)
    return out.getvalue()


def read_long_csv(
    path_or_text: str | os.PathLike, endpoint: Endpoint | str | None = None
) -> Dataset:
    """Read a long-format CSV; the endpoint is inferred when not given."""
    text = _read_csv_text(path_or_text)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise DataError("empty CSV: header row required")
    missing = {"study", "arm"} - set(reader.fieldnames)
    if missing:
        raise DataError(f"long-format CSV must have columns {sorted(missing)}")
    rows = list(reader)
    populated = {
        role
        for role in LONG_COLUMNS[2:]
        if role in (reader.fieldnames or [])
        and any((r.get(role) or "").strip() for r in rows)
    }
    if endpoint is None:
        matches = [
            ep for ep, need in ENDPOINT_ROLES.items() if set(need) <= populated
        ]
        if len(matches) != 1:
            raise DataError(
                f"cannot infer endpoint from populated columns {sorted(populated)}"
            )
        endpoint = matches[0]
    endpoint = Endpoint(endpoint)

    arms = []
    for irow, r in enumerate(rows, start=1):
        study = _coerce(r["study"], "int", "study", irow)
        arm = _coerce(r["arm"], "int", "arm", irow)
        if study is None or arm is None:
            raise DataError(f"row {irow}: study/arm must be set")
        kwargs: dict = {"study": study, "arm": arm}
        for role in LONG_COLUMNS[2:]:
            cell = (r.get(role) or "").strip()
            if cell == "":
                continue
            kind = "int" if role in ("responders", "sampleSize", "count") else "float"
            kwargs[_ROLE_ATTR[role]] = _coerce(cell, kind, role, irow)
        arms.append(ArmRecord(**kwargs))
    if not arms:
        return Dataset(endpoint=endpoint, arms=())
    return Dataset(endpoint=endpoint, arms=tuple(arms))


# ---------------------------------------------------------------------------
# Bundled example data: topiramate in migraine prophylaxis
# (Boucher & Bennetts 2016 landmark dataset; paresthesia events)
# ---------------------------------------------------------------------------

BOUCHER2016_PAIRWISE_CSV = """\
study,duration,r1,n1,r2,n2
Edwards (2000),short,4,73,63,140
Storey (2001),short,8,116,53,113
Brandes (2004),long,9,143,81,144
Diener (2004),long,5,113,57,117
Silberstein (2004),long,4,21,13,19
Silberstein (2006),short,4,15,9,15
"""

BOUCHER2016_FULL_CSV = """\
study,nd,d1,r1,n1,d2,r2,n2,d3,r3,n3,d4,r4,n4
Edwards (2000),2,0,4,73,200,63,140,,,,,,
Storey (2001),4,0,8,116,50,43,118,100,59,126,200,53,113
Brandes (2004),3,0,9,143,100,77,141,200,81,144,,,
Diener (2004),4,0,5,113,50,40,117,100,59,119,200,57,117
Silberstein (2004),2,0,4,21,200,13,19,,,,,,
Silberstein (2006),2,0,4,15,200,9,15,,,,,,
"""

BUILTIN_DATASETS = ("boucher2016_pairwise", "boucher2016_full")


def builtin_wide_table(name: str) -> WideTable:
    """The raw one-study-per-row table behind a bundled dataset."""
    if name == "boucher2016_pairwise":
        return parse_csv(BOUCHER2016_PAIRWISE_CSV)
    if name == "boucher2016_full":
        return parse_csv(BOUCHER2016_FULL_CSV, n_arms_column="nd")
    raise DataError(f"unknown builtin dataset '{name}'; choose from {BUILTIN_DATASETS}")


def builtin_dataset(name: str) -> Dataset:
    """A bundled dataset in long format.

    ``boucher2016_pairwise``: six two-arm placebo-controlled trials,
    binary paresthesia outcome, with the short/long follow-up duration as
    a study-level covariate.  ``boucher2016_full``: the extended version
    with per-arm topiramate doses (0-200 mg) and two to four arms per
    trial.
    """
    wide = builtin_wide_table(name)
    if name == "boucher2016_pairwise":
        return convert_wide_to_long(
            wide,
            {"responders": "r", "sampleSize": "n"},
            Endpoint.BINARY,
            label_column="study",
            covariate_columns=("duration",),
        )
    return convert_wide_to_long(
        wide,
        {"dose": "d", "responders": "r", "sampleSize": "n"},
        Endpoint.BINARY,
        label_column="study",
    )
