"""Point-cloud files, binary feature/bank containers, scores CSV and heatmaps."""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
from typing import Optional, Sequence

import numpy as np

from .core import LABEL_CODES, LABEL_NAMES, PointCloud
from .errors import FileAccessError, FormatError, ParameterError
from .features import Block, FeatureMatrix
from .patchcore import AnomalyResult, MemoryBank

log = logging.getLogger(__name__)

CLOUD_FORMATS = ("ply-ascii", "ply-binary-le", "xyz-csv")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}

FEATURE_MAGIC = b"MFPFHIFM"
BANK_MAGIC = b"MFPFHIMB"
CONTAINER_VERSION = 1


# -- PLY ----------------------------------------------------------------------

def _parse_ply_header(fh, path):
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError(f"{path}: line 1: not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []
    line_no = 1
    while True:
        raw = fh.readline()
        line_no += 1
        if not raw:
            raise FormatError(f"{path}: header ended before 'end_header'")
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise FormatError(f"{path}: line {line_no}: unsupported format line {raw!r}")
            fmt = parts[1]
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise FormatError(f"{path}: line {line_no}: malformed element line")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": [], "has_list": False})
        elif key == "property":
            if not elements:
                raise FormatError(f"{path}: line {line_no}: property before any element")
            if len(parts) >= 2 and parts[1] == "list":
                if len(parts) != 5:
                    raise FormatError(f"{path}: line {line_no}: malformed list property")
                elements[-1]["has_list"] = True
                elements[-1]["props"].append((parts[4], None))
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: line {line_no}: unknown property type in {raw!r}")
            elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]]))
        elif key == "end_header":
            break
        else:
            raise FormatError(f"{path}: line {line_no}: unexpected header keyword {key!r}")
    if fmt is None:
        raise FormatError(f"{path}: PLY header has no format line")
    return fmt, elements, line_no


def _read_ply(path: str) -> dict:
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_ply_header(fh, path)
        vertex = None
        if fmt == "ascii":
            lines = fh.read().decode("ascii", errors="replace").splitlines()
            cursor = 0
            for el in elements:
                if el["name"] != "vertex":
                    cursor += el["count"]
                    continue
                if el["has_list"]:
                    raise FormatError(f"{path}: list properties on vertices are not supported")
                names = [p[0] for p in el["props"]]
                rows = lines[cursor:cursor + el["count"]]
                if len(rows) < el["count"]:
                    raise FormatError(f"{path}: header declares {el['count']} vertices, file has {len(rows)}")
                data = np.empty((el["count"], len(names)))
                for k, row in enumerate(rows):
                    tokens = row.split()
                    if len(tokens) != len(names):
                        raise FormatError(f"{path}: line {header_lines + cursor + k + 1}: expected "
                                          f"{len(names)} values, found {len(tokens)}")
                    try:
                        data[k] = [float(t) for t in tokens]
                    except ValueError:
                        raise FormatError(f"{path}: line {header_lines + cursor + k + 1}: "
                                          f"non-numeric value") from None
                vertex = {name: data[:, i] for i, name in enumerate(names)}
                break
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            payload = fh.read()
            offset = 0
            for el in elements:
                if el["has_list"]:
                    if el["name"] == "vertex":
                        raise FormatError(f"{path}: list properties on vertices are not supported")
                    raise FormatError(f"{path}: cannot skip list element {el['name']!r} before vertices")
                dtype = np.dtype([(name, endian + t) for name, t in el["props"]])
                size = dtype.itemsize * el["count"]
                if el["name"] == "vertex":
                    if offset + size > len(payload):
                        raise FormatError(f"{path}: byte offset {offset}: expected {size} bytes of "
                                          f"vertex data, {len(payload) - offset} available")
                    arr = np.frombuffer(payload, dtype=dtype, count=el["count"], offset=offset)
                    vertex = {name: arr[name].astype(np.float64) for name in arr.dtype.names}
                    break
                offset += size
    if vertex is None:
        raise FormatError(f"{path}: no vertex element")
    return vertex


def _write_ply(path: str, columns: Sequence, binary: bool = True) -> None:
    """``columns`` is a sequence of (name, numpy dtype code, values)."""
    n = len(columns[0][2])
    head = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
            f"element vertex {n}"]
    head += [f"property {_PLY_NAMES[t]} {name}" for name, t, _ in columns]
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            if binary:
                dtype = np.dtype([(name, "<" + t) for name, t, _ in columns])
                arr = np.empty(n, dtype=dtype)
                for name, _, values in columns:
                    arr[name] = values
                fh.write(arr.tobytes())
            else:
                fmts = ["%d" if t[0] in "iu" else "%.17g" for _, t, _ in columns]
                stacked = np.column_stack([np.asarray(v, dtype=np.float64) for _, _, v in columns])
                for row in stacked:
                    fh.write((" ".join(f % v for f, v in zip(fmts, row)) + "\n").encode("ascii"))
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write: {exc.strerror}") from None


# -- xyz CSV --------------------------------------------------------------------

def _read_xyz_csv(path: str) -> dict:
    with open(path, newline="") as fh:
        text = fh.read()
    delimiter = "," if "," in text.split("\n", 1)[0] else None
    lines = text.splitlines()
    names = None
    rows = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tokens = [t.strip() for t in (line.split(delimiter) if delimiter else line.split())]
        if names is None:
            try:
                [float(t) for t in tokens[:3]]
                names = ["x", "y", "z", "intensity", "label"][:len(tokens)]
                if len(tokens) > 5:
                    raise FormatError(f"{path}: line {line_no}: too many columns without a header")
            except ValueError:
                names = [t.lower() for t in tokens]
                continue
        if len(tokens) != len(names):
            raise FormatError(f"{path}: line {line_no}: expected {len(names)} values, found {len(tokens)}")
        rows.append((line_no, tokens))
    if names is None or not rows:
        raise FormatError(f"{path}: no data rows")
    columns = {name: [] for name in names}
    for line_no, tokens in rows:
        for name, tok in zip(names, tokens):
            if name == "label":
                try:
                    columns[name].append(int(tok))
                except ValueError:
                    if tok not in LABEL_CODES:
                        raise FormatError(f"{path}: line {line_no}: unknown label {tok!r}") from None
                    columns[name].append(LABEL_CODES[tok])
                continue
            try:
                columns[name].append(float(tok))
            except ValueError:
                raise FormatError(f"{path}: line {line_no}: non-numeric value {tok!r} in column {name!r}") from None
    return {name: np.asarray(vals, dtype=np.float64) for name, vals in columns.items()}


# -- clouds -----------------------------------------------------------------------

def detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ply":
        with open(path, "rb") as fh:
            head = fh.read(512)
        return "ply-ascii" if b"format ascii" in head else "ply-binary-le"
    if ext in (".csv", ".xyz", ".txt"):
        return "xyz-csv"
    raise FormatError(f"{path}: cannot infer the cloud format from extension {ext!r}")


def read_cloud(path: str, fmt: Optional[str] = None, intensity_property: str = "intensity",
               frame_id: Optional[str] = None) -> PointCloud:
    """Load positions, intensity and optional labels; intensities are min-max normalized.

    Without an intensity property the RGB channels are converted to grey
    (0.299 R + 0.587 G + 0.114 B, each channel scaled to [0, 1]).
    """
    if not os.path.exists(path):
        raise FileAccessError(f"{path}: no such file")
    fmt = fmt or detect_format(path)
    if fmt not in CLOUD_FORMATS:
        raise ParameterError(f"unknown cloud format {fmt!r}")
    cols = _read_xyz_csv(path) if fmt == "xyz-csv" else _read_ply(path)
    missing = [c for c in "xyz" if c not in cols]
    if missing:
        raise FormatError(f"{path}: missing coordinate properties {missing}")
    positions = np.column_stack([cols["x"], cols["y"], cols["z"]])
    if intensity_property in cols:
        raw = cols[intensity_property]
    else:
        rgb = _rgb_columns(cols)
        if rgb is None:
            log.warning("%s: no %r or RGB properties; intensity set to zero", path, intensity_property)
            raw = np.zeros(positions.shape[0])
        else:
            raw = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    labels = cols.get("label")
    if labels is not None:
        labels = labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= len(LABEL_NAMES):
            raise FormatError(f"{path}: label codes must lie in 0..{len(LABEL_NAMES) - 1}")
    try:
        return PointCloud.from_raw(positions, raw, labels,
                                   frame_id if frame_id is not None else os.path.basename(path))
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _rgb_columns(cols: dict):
    for names in (("red", "green", "blue"), ("r", "g", "b")):
        if all(n in cols for n in names):
            chans = [cols[n] for n in names]
            scale = 255.0 if max(float(c.max()) for c in chans) > 1.0 else 1.0
            return [c / scale for c in chans]
    return None


def write_cloud(cloud: PointCloud, path: str, fmt: str = "ply-binary-le") -> None:
    """Write positions, raw intensities and labels (if any)."""
    if fmt == "xyz-csv":
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                header = ["x", "y", "z", "intensity"] + (["label"] if cloud.labels is not None else [])
                w.writerow(header)
                for i in range(len(cloud)):
                    row = [repr(float(v)) for v in cloud.positions[i]] + [repr(float(cloud.raw_intensities[i]))]
                    if cloud.labels is not None:
                        row.append(int(cloud.labels[i]))
                    w.writerow(row)
        except OSError as exc:
            raise FileAccessError(f"{path}: cannot write: {exc.strerror}") from None
        return
    if fmt not in ("ply-ascii", "ply-binary-le"):
        raise ParameterError(f"unknown cloud format {fmt!r}")
    columns = [("x", "f8", cloud.positions[:, 0]), ("y", "f8", cloud.positions[:, 1]),
               ("z", "f8", cloud.positions[:, 2]), ("intensity", "f8", cloud.raw_intensities)]
    if cloud.labels is not None:
        columns.append(("label", "u1", cloud.labels))
    _write_ply(path, columns, binary=(fmt == "ply-binary-le"))


# -- heatmaps ---------------------------------------------------------------------

def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def heatmap_colors(scores: np.ndarray, saturation: float = 0.5) -> np.ndarray:
    """Blue-to-red ramp over [0, saturation]; anything at or above it is pure red."""
    t = np.clip(np.asarray(scores, dtype=np.float64) / saturation, 0.0, 1.0)
    red = _round_half_up(255.0 * t)
    blue = _round_half_up(255.0 * (1.0 - t))
    return np.column_stack([red, np.zeros_like(red), blue]).astype(np.uint8)


def write_heatmap(result: AnomalyResult, cloud: PointCloud, path: str,
                  point_ids: Optional[np.ndarray] = None) -> None:
    """PLY with per-vertex colour and score.

    When ``point_ids`` is given the result covers only those points; the
    rest take the score of their nearest scored neighbour.
    """
    from .patchcore import propagate_to_points

    if point_ids is not None:
        result = propagate_to_points(result, point_ids, cloud.positions)
    if len(result) != len(cloud):
        raise ParameterError(f"result has {len(result)} rows for a cloud of {len(cloud)} points")
    colors = heatmap_colors(result.scores)
    _write_ply(path, [("x", "f8", cloud.positions[:, 0]), ("y", "f8", cloud.positions[:, 1]),
                      ("z", "f8", cloud.positions[:, 2]), ("red", "u1", colors[:, 0]),
                      ("green", "u1", colors[:, 1]), ("blue", "u1", colors[:, 2]),
                      ("score", "f8", result.scores)])


# -- scores CSV -----------------------------------------------------------------

def threshold_column(t: float) -> str:
    return "predicted_" + f"{t:g}".replace(".", "")


def write_scores_csv(path: str, cloud: PointCloud, result: AnomalyResult,
                     thresholds: Sequence[float] = (0.3, 0.5)) -> None:
    """One row per cloud point; ``result`` must already cover every point."""
    if len(result) != len(cloud):
        raise ParameterError(f"result has {len(result)} rows for a cloud of {len(cloud)} points")
    header = ["point_id", "x", "y", "z", "min_dist", "score"]
    if cloud.labels is not None:
        header.append("label")
    header += [threshold_column(t) for t in thresholds]
    masks = [result.scores > t for t in thresholds]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(cloud)):
                row = [i] + [repr(float(v)) for v in cloud.positions[i]]
                row += [repr(float(result.min_dists[i])), repr(float(result.scores[i]))]
                if cloud.labels is not None:
                    row.append(LABEL_NAMES[cloud.labels[i]])
                row += [int(m[i]) for m in masks]
                w.writerow(row)
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write: {exc.strerror}") from None


def read_scores_csv(path: str):
    """Returns (AnomalyResult, labels or None)."""
    if not os.path.exists(path):
        raise FileAccessError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"min_dist", "score"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise FormatError(f"{path}: scores CSV needs columns {sorted(required)}")
        has_label = "label" in reader.fieldnames
        dists, scores, labels = [], [], []
        for line_no, row in enumerate(reader, start=2):
            try:
                dists.append(float(row["min_dist"]))
                scores.append(float(row["score"]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}: line {line_no}: malformed score row") from None
            if has_label:
                if row["label"] not in LABEL_CODES:
                    raise FormatError(f"{path}: line {line_no}: unknown label {row['label']!r}")
                labels.append(LABEL_CODES[row["label"]])
    dists = np.asarray(dists)
    scores = np.asarray(scores)
    result = AnomalyResult(dists, scores, np.full(dists.size, -1), bool(scores.size and scores.max() == 0))
    return result, (np.asarray(labels, dtype=np.int8) if has_label else None)


# -- binary containers ------------------------------------------------------------
# layout: magic (8 bytes) | u32 version | u32 header length | JSON header | <f4 rows

def _layout_json(layout) -> list:
    return [{"name": b.name, "bins": b.bins, "weight": b.weight} for b in layout]


def _layout_from_json(items) -> tuple:
    return tuple(Block(str(d["name"]), int(d["bins"]), float(d["weight"])) for d in items)


def _write_container(path: str, magic: bytes, header: dict, rows: np.ndarray) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<II", CONTAINER_VERSION, len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write: {exc.strerror}") from None


def _read_container(path: str, magic: bytes):
    if not os.path.exists(path):
        raise FileAccessError(f"{path}: no such file")
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != magic:
        raise FormatError(f"{path}: byte offset 0: bad magic {data[:8]!r}, expected {magic!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated container header")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: byte offset 8: unsupported container version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: byte offset 16: malformed header ({exc})") from None
    n, width = int(header["n_rows"]), int(header["width"])
    body = data[16 + hlen:]
    if len(body) != 4 * n * width:
        raise FormatError(f"{path}: byte offset {16 + hlen}: expected {4 * n * width} bytes of rows, "
                          f"found {len(body)}")
    rows = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(np.float64)
    return header, rows


def write_features(features: FeatureMatrix, path: str) -> None:
    header = {"kind": "features", "n_rows": len(features), "width": features.width,
              "layout": _layout_json(features.layout), "params": features.params,
              "point_ids": features.point_ids.tolist(),
              "empty": features.empty.astype(int).tolist()}
    _write_container(path, FEATURE_MAGIC, header, features.rows)


def read_features(path: str) -> FeatureMatrix:
    header, rows = _read_container(path, FEATURE_MAGIC)
    try:
        return FeatureMatrix(rows, _layout_from_json(header["layout"]), np.asarray(header["point_ids"]),
                             np.asarray(header["empty"], dtype=bool).reshape(rows.shape[0], -1),
                             dict(header.get("params", {})))
    except (KeyError, ParameterError) as exc:
        raise FormatError(f"{path}: inconsistent feature header ({exc})") from None


def write_bank(bank: MemoryBank, path: str) -> None:
    header = {"kind": "bank", "n_rows": bank.m, "width": int(bank.features.shape[1]),
              "layout": _layout_json(bank.layout), "seed": bank.seed, "source_id": bank.source_id,
              "selected": [] if bank.selected is None else bank.selected.tolist(),
              "params": bank.params}
    _write_container(path, BANK_MAGIC, header, bank.features)


def read_bank(path: str) -> MemoryBank:
    header, rows = _read_container(path, BANK_MAGIC)
    try:
        layout = _layout_from_json(header["layout"])
        if sum(b.bins for b in layout) != rows.shape[1]:
            raise FormatError(f"{path}: layout width does not match row width")
        return MemoryBank(rows, layout, int(header["seed"]), str(header.get("source_id", "")),
                          np.asarray(header.get("selected", []), dtype=np.int64),
                          dict(header.get("params", {})))
    except KeyError as exc:
        raise FormatError(f"{path}: bank header lacks {exc}") from None


# -- evaluation reports -----------------------------------------------------------

def _write_rows(path: str, header: Sequence[str], rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write: {exc.strerror}") from None


def write_report(report, outdir: str) -> dict:
    """Write report.txt, metrics.csv, label_stats.csv and one kde_<group>.csv per curve.

    Returns a mapping from artifact name to path.
    """
    os.makedirs(outdir, exist_ok=True)
    paths = {"report": os.path.join(outdir, "report.txt"),
             "metrics": os.path.join(outdir, "metrics.csv"),
             "label_stats": os.path.join(outdir, "label_stats.csv")}
    try:
        with open(paths["report"], "w") as fh:
            fh.write(report.to_text())
    except OSError as exc:
        raise FileAccessError(f"{paths['report']}: cannot write: {exc.strerror}") from None
    _write_rows(paths["metrics"], ["threshold", "tp", "fp", "fn", "tn", "precision", "recall", "f1"],
                [[f"{m.threshold:g}", m.tp, m.fp, m.fn, m.tn, repr(m.precision), repr(m.recall),
                  repr(m.f1)] for m in report.metrics])
    _write_rows(paths["label_stats"], ["group", "n", "mean", "std"],
                [[name, g.n, repr(g.mean), repr(g.std)] for name, g in report.groups.items()])
    for name, curve in report.kde.items():
        key = f"kde_{name}"
        paths[key] = os.path.join(outdir, key + ".csv")
        _write_rows(paths[key], ["min_dist", "density"],
                    [[repr(float(a)), repr(float(b))] for a, b in zip(curve.grid, curve.density)])
    return paths


def read_kde_csv(path: str):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
