"""CSV ingestion and output writers.

Input layout::

    groups.csv   group_id,signal
    items.csv    group_id,<feature columns...>[,weight][,label]
                 or the pre-binned variant group_id,bin[,weight][,label]
    binning.csv  bin,label[,<feature columns...>]   (optional manifest)

Floats are written with 17 significant digits so they read back exactly.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import downweight
from .model import BehaviorBinning, Dataset, GroupObservations, PosteriorEstimate, logit

SIGNAL_KINDS = ("logit", "fraction")
LEVEL_SEP = ":"


class IngestError(ValueError):
    """Bad input file; the message names the file and line."""


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class IngestSpec:
    groups_file: Path
    items_file: Path
    signal_kind: str = "logit"
    feature_columns: Sequence[str] = field(default_factory=list)
    cap_m: Optional[float] = None
    binning_file: Optional[Path] = None

    def __post_init__(self):
        self.groups_file = Path(self.groups_file)
        self.items_file = Path(self.items_file)
        if self.binning_file is not None:
            self.binning_file = Path(self.binning_file)
        self.feature_columns = list(self.feature_columns or [])
        if self.signal_kind not in SIGNAL_KINDS:
            raise ValueError(f"signal_kind must be one of {SIGNAL_KINDS}, got {self.signal_kind!r}")
        if self.cap_m is not None and not self.cap_m > 0:
            raise ValueError("cap_m must be positive")


def _reader(path: Path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"{path}: cannot open: {exc.strerror}") from exc
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        fh.close()
        raise IngestError(f"{path}: empty file, expected a header row") from None
    return fh, header, reader


def _require(path, header, cols):
    missing = [c for c in cols if c not in header]
    if missing:
        raise IngestError(f"{path}: missing column(s) {missing}; header is {header}")


def _float(path, line, col, text):
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"{path}:{line}: column {col!r}: not a number: {text!r}") from None


def read_groups(path: Path, signal_kind: str = "logit"):
    fh, header, reader = _reader(path)
    with fh:
        _require(path, header, ["group_id", "signal"])
        gi, si = header.index("group_id"), header.index("signal")
        ids, signals = [], []
        seen = set()
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            gid = row[gi].strip()
            if gid in seen:
                raise IngestError(f"{path}:{line}: duplicate group_id {gid!r}")
            seen.add(gid)
            value = _float(path, line, "signal", row[si])
            if signal_kind == "fraction":
                if not 0.0 <= value <= 1.0:
                    raise IngestError(f"{path}:{line}: fraction {value} outside [0, 1]")
                value = logit(value)
            ids.append(gid)
            signals.append(value)
    return ids, signals


def read_binning(path: Path):
    """Manifest rows ``(bin, label, {feature: level})`` in bin order."""
    fh, header, reader = _reader(path)
    with fh:
        _require(path, header, ["bin", "label"])
        features = [h for h in header if h not in ("bin", "label")]
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, (v.strip() for v in row)))
            try:
                b = int(rec["bin"])
            except ValueError:
                raise IngestError(f"{path}:{line}: column 'bin': not an integer: {rec['bin']!r}") from None
            if b != len(rows) + 1:
                raise IngestError(f"{path}:{line}: bins must be listed as 1, 2, ...; got {b}")
            rows.append((b, rec["label"], {f: rec[f] for f in features}))
    if len(rows) < 2:
        raise IngestError(f"{path}: a binning needs at least 2 bins")
    return features, rows


def ingest(spec: IngestSpec) -> tuple:
    """Read a dataset; returns ``(dataset, manifest_rows)``.

    With ``feature_columns`` the bins are the cross product of each column's
    levels, sorted lexicographically, last column varying fastest. Without
    them ``items.csv`` must carry a ``bin`` column.
    """
    ids, signals = read_groups(spec.groups_file, spec.signal_kind)
    index = {gid: i for i, gid in enumerate(ids)}
    manifest = None
    if spec.binning_file is not None:
        manifest_features, manifest = read_binning(spec.binning_file)
        if spec.feature_columns and list(spec.feature_columns) != manifest_features:
            raise IngestError(
                f"{spec.binning_file}: manifest features {manifest_features} "
                f"do not match requested {list(spec.feature_columns)}"
            )

    path = spec.items_file
    fh, header, reader = _reader(path)
    with fh:
        _require(path, header, ["group_id"])
        features = list(spec.feature_columns)
        if features:
            _require(path, header, features)
        else:
            _require(path, header, ["bin"])
        gcol = header.index("group_id")
        fcols = [header.index(f) for f in features]
        bcol = header.index("bin") if not features else None
        wcol = header.index("weight") if "weight" in header else None
        lcol = header.index("label") if "label" in header else None

        gidx, raw, weights, labels, lines = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            gid = row[gcol].strip()
            if gid not in index:
                raise IngestError(f"{path}:{line}: unknown group_id {gid!r}")
            gidx.append(index[gid])
            if features:
                raw.append(tuple(row[c].strip() for c in fcols))
            else:
                try:
                    raw.append(int(row[bcol]))
                except ValueError:
                    raise IngestError(
                        f"{path}:{line}: column 'bin': not an integer: {row[bcol]!r}"
                    ) from None
            weights.append(1.0 if wcol is None else _float(path, line, "weight", row[wcol]))
            if lcol is not None:
                lab = _float(path, line, "label", row[lcol])
                if lab not in (0.0, 1.0):
                    raise IngestError(f"{path}:{line}: column 'label' must be 0 or 1, got {row[lcol]!r}")
                labels.append(lab)
            lines.append(line)

    if features:
        if manifest is not None:
            lookup = {tuple(levels[f] for f in features): b for b, _, levels in manifest}
            labels_out = [lab for _, lab, _ in manifest]
            factor_levels = _factor_levels(manifest, features)
        else:
            observed = [sorted({r[c] for r in raw}) for c in range(len(features))]
            combos = list(itertools.product(*observed))
            lookup = {combo: b for b, combo in enumerate(combos, start=1)}
            labels_out = [LEVEL_SEP.join(c) for c in combos]
            factor_levels = [len(o) for o in observed]
            manifest = [(b, LEVEL_SEP.join(c), dict(zip(features, c))) for c, b in lookup.items()]
        bins = []
        for r, line in zip(raw, lines):
            if r not in lookup:
                raise IngestError(f"{path}:{line}: factor levels {dict(zip(features, r))} not in the binning")
            bins.append(lookup[r])
    else:
        bins = raw
        if manifest is not None:
            labels_out = [lab for _, lab, _ in manifest]
        else:
            K = max(max(bins, default=2), 2)
            labels_out = [f"bin{k}" for k in range(1, K + 1)]
            manifest = [(k, lab, {}) for k, lab in enumerate(labels_out, start=1)]
        factor_levels = _factor_levels(manifest, []) if manifest and manifest[0][2] else [len(labels_out)]
        for b, line in zip(bins, lines):
            if not 1 <= b <= len(labels_out):
                raise IngestError(f"{path}:{line}: bin {b} outside [1, {len(labels_out)}]")
    for w, line in zip(weights, lines):
        if not 0.0 < w <= 1.0:
            raise IngestError(f"{path}:{line}: weight {w} outside (0, 1]")

    K = len(labels_out)
    if K < 2:
        raise IngestError(f"{path}: need at least 2 bins, found {K}")
    try:
        binning = BehaviorBinning(K, tuple(factor_levels), tuple(labels_out))
    except ValueError as exc:
        raise IngestError(f"inconsistent binning: {exc}") from None

    gidx = np.asarray(gidx, dtype=np.int64)
    order = np.argsort(gidx, kind="stable")
    splits = np.cumsum(np.bincount(gidx, minlength=len(ids)))[:-1]
    bins_g = np.split(np.asarray(bins, dtype=np.int64)[order], splits)
    w_g = np.split(np.asarray(weights, dtype=float)[order], splits)
    groups = tuple(
        GroupObservations(gid, s, b, w) for gid, s, b, w in zip(ids, signals, bins_g, w_g)
    )
    item_labels = None
    if lcol is not None:
        item_labels = tuple(np.split(np.asarray(labels, dtype=float)[order], splits))
    dataset = Dataset(binning, groups, item_labels)
    if spec.cap_m is not None:
        dataset = downweight(dataset, spec.cap_m)
    return dataset, manifest


def _factor_levels(manifest, features):
    features = features or list(manifest[0][2])
    if not features:
        return [len(manifest)]
    return [len(dict.fromkeys(levels[f] for _, _, levels in manifest)) for f in features]


def write_binning(path: Path, manifest) -> None:
    features = list(manifest[0][2]) if manifest and manifest[0][2] else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "label", *features])
        for b, label, levels in manifest:
            w.writerow([b, label, *(levels[f] for f in features)])


def manifest_from_binning(binning: BehaviorBinning):
    return [(k, lab, {}) for k, lab in enumerate(binning.labels, start=1)]


def write_dataset(directory: Path, dataset: Dataset) -> None:
    """groups.csv, items.csv (with label and weight columns when present) and binning.csv."""
    directory = Path(directory)
    with open(directory / "groups.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "signal"])
        for g in dataset.groups:
            w.writerow([g.group_id, fmt(g.he)])
    unit = all(np.all(g.weights == 1.0) for g in dataset.groups)
    labelled = dataset.item_labels is not None
    with open(directory / "items.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_id", "bin"] + ([] if unit else ["weight"]) + (["label"] if labelled else []))
        for i, g in enumerate(dataset.groups):
            labs = dataset.item_labels[i] if labelled else None
            for j in range(g.n_items):
                row = [g.group_id, int(g.bins[j])]
                if not unit:
                    row.append(fmt(g.weights[j]))
                if labelled:
                    row.append(int(labs[j]))
                w.writerow(row)
    write_binning(directory / "binning.csv", manifest_from_binning(dataset.binning))


RHO_COLUMNS = ["bin", "label", "method", "rho", "se", "in_unit_interval"]


def write_rho(path: Path, estimates: Sequence[PosteriorEstimate], labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RHO_COLUMNS)
        for est in estimates:
            inside = est.in_unit_interval
            for k, lab in enumerate(labels):
                se = "" if est.se is None else fmt(est.se[k])
                w.writerow([k + 1, lab, est.method, fmt(est.rho[k]), se, "true" if inside[k] else "false"])


def read_rho(path: Path):
    """Parse rho.csv into ``{method: {"bin", "label", "rho", "se"}}`` in file order."""
    fh, header, reader = _reader(path)
    out = {}
    with fh:
        _require(path, header, ["bin", "method", "rho"])
        col = {h: i for i, h in enumerate(header)}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            m = row[col["method"]]
            rec = out.setdefault(m, {"bin": [], "label": [], "rho": [], "se": []})
            try:
                rec["bin"].append(int(row[col["bin"]]))
            except ValueError:
                raise IngestError(f"{path}:{line}: column 'bin': not an integer: {row[col['bin']]!r}") from None
            rec["label"].append(row[col["label"]] if "label" in col else str(rec["bin"][-1]))
            rec["rho"].append(_float(path, line, "rho", row[col["rho"]]))
            se = row[col["se"]].strip() if "se" in col else ""
            rec["se"].append(_float(path, line, "se", se) if se else math.nan)
    return out


def read_truth(path: Path):
    fh, header, reader = _reader(path)
    with fh:
        _require(path, header, ["bin", "true_rho"])
        bi, ri = header.index("bin"), header.index("true_rho")
        bins, rho = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                bins.append(int(row[bi]))
            except (ValueError, IndexError):
                raise IngestError(f"{path}:{line}: column 'bin': bad value") from None
            rho.append(_float(path, line, "true_rho", row[ri]))
    return bins, rho


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
