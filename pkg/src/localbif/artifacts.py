"""On-disk artifacts and the per-directory manifest.

Binary matrix (``.lbm``) and trace (``.lbt``) files are a magic line, one
line of sorted-key JSON header, then little-endian float64 data in row-major
order. Each output directory carries ``manifest.json`` with the SHA-256 of
every artifact; loaders re-check it. Wall-clock timings live in
``timing.json``, which is not hashed, so artifacts stay byte-reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .errors import ArtifactIntegrityError, IncompatibleError, ValidationError
from .estimators import InfluenceMatrix
from .sgld import ChainTrace

MATRIX_MAGIC = b"LBIFMAT1\n"
TRACE_MAGIC = b"LBIFTRC1\n"
MANIFEST = "manifest.json"
TIMING = "timing.json"
FORMAT_VERSION = 1


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pack(magic: bytes, header: dict, arrays) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return magic + head + b"\n" + body


def _unpack(raw: bytes, magic: bytes, what: str):
    if not raw.startswith(magic):
        raise ArtifactIntegrityError(f"not a {what} artifact (bad magic)")
    end = raw.find(b"\n", len(magic))
    if end < 0:
        raise ArtifactIntegrityError(f"truncated {what} header")
    try:
        header = json.loads(raw[len(magic):end])
    except json.JSONDecodeError as e:
        raise ArtifactIntegrityError(f"corrupt {what} header: {e}") from None
    return header, raw[end + 1:]


def matrix_bytes(mat: InfluenceMatrix, config_hash: str = "") -> bytes:
    header = {"format": FORMAT_VERSION, "kind": mat.kind, "shape": list(mat.shape),
              "row_labels": list(mat.row_labels), "col_labels": list(mat.col_labels),
              "metadata": mat.metadata, "config_hash": config_hash}
    return _pack(MATRIX_MAGIC, header, [mat.values])


def parse_matrix(raw: bytes) -> InfluenceMatrix:
    header, body = _unpack(raw, MATRIX_MAGIC, "matrix")
    rows, cols = header["shape"]
    if len(body) != 8 * rows * cols:
        raise ArtifactIntegrityError(f"matrix body has {len(body)} bytes, expected {8 * rows * cols}")
    values = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return InfluenceMatrix(values, header["row_labels"], header["col_labels"], header["kind"], header["metadata"])


def trace_bytes(trace: ChainTrace) -> bytes:
    header = {"format": FORMAT_VERSION, "n_rows": len(trace.row_labels), "n_cols": len(trace.col_labels),
              "draws": trace.draw_count, "chain_boundaries": list(trace.chain_boundaries),
              "row_labels": list(trace.row_labels), "col_labels": list(trace.col_labels)}
    return _pack(TRACE_MAGIC, header, [trace.train_losses, trace.observables])


def parse_trace(raw: bytes) -> ChainTrace:
    header, body = _unpack(raw, TRACE_MAGIC, "trace")
    n, q, N = header["n_rows"], header["n_cols"], header["draws"]
    if len(body) != 8 * (n + q) * N:
        raise ArtifactIntegrityError("trace body length does not match its header")
    data = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ChainTrace(data[:n * N].reshape(n, N), data[n * N:].reshape(q, N),
                      tuple(header["chain_boundaries"]), tuple(header["row_labels"]), tuple(header["col_labels"]))


def matrix_csv(mat: InfluenceMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["train_id", *mat.col_labels])
    for label, row in zip(mat.row_labels, mat.values):
        w.writerow([label, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def records_jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in records)


class ArtifactWriter:
    """Writes files into one fresh output directory and records their hashes.

    Refuses to reuse an existing directory so earlier results are never
    overwritten. :meth:`close` writes the manifest.
    """

    def __init__(self, directory: str | Path, command: str, config_hash: str = ""):
        self.dir = Path(directory)
        if self.dir.exists():
            raise IncompatibleError(f"output directory {str(self.dir)!r} already exists; choose another run_id")
        self.dir.mkdir(parents=True)
        self.command = command
        self.config_hash = config_hash
        self.files: dict[str, str] = {}

    def write_bytes(self, name: str, data: bytes) -> Path:
        if "/" in name or name in (MANIFEST, TIMING):
            raise ValidationError(f"invalid artifact name {name!r}")
        path = self.dir / name
        path.write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode())

    def write_matrix(self, stem: str, mat: InfluenceMatrix) -> None:
        self.write_bytes(f"{stem}.lbm", matrix_bytes(mat, self.config_hash))
        self.write_text(f"{stem}.csv", matrix_csv(mat))

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, dumps_json(obj))

    def close(self, timing: dict | None = None) -> Path:
        manifest = {"format": FORMAT_VERSION, "command": self.command, "config_hash": self.config_hash,
                    "files": dict(sorted(self.files.items()))}
        (self.dir / MANIFEST).write_text(dumps_json(manifest))
        if timing is not None:
            (self.dir / TIMING).write_text(dumps_json(timing))
        return self.dir / MANIFEST


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ArtifactIntegrityError(f"no manifest in {str(Path(directory))!r}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactIntegrityError(f"corrupt manifest {str(path)!r}: {e}") from None


def verified_bytes(path: str | Path) -> bytes:
    """File contents, after checking them against the sibling manifest."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"artifact {str(path)!r} does not exist")
    manifest = read_manifest(path.parent)
    expected = manifest.get("files", {}).get(path.name)
    if expected is None:
        raise ArtifactIntegrityError(f"{path.name} is not listed in the manifest")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != expected:
        raise ArtifactIntegrityError(f"{str(path)!r} does not match its manifest hash")
    return raw


def verify_directory(directory: str | Path) -> dict:
    """Check every manifest entry; returns the manifest."""
    manifest = read_manifest(directory)
    for name in manifest.get("files", {}):
        verified_bytes(Path(directory) / name)
    return manifest


def load_matrix(path: str | Path) -> InfluenceMatrix:
    return parse_matrix(verified_bytes(path))


def load_trace(path: str | Path) -> ChainTrace:
    return parse_trace(verified_bytes(path))
