"""Manifests and binary containers.

Formats (all little-endian, all versioned):

* manifest: UTF-8 TSV. First line ``#classes\t<name>\t<name>...``, then a
  column header, then one record per line.
* ``MILF`` feature store: append-only file of records; each record holds an
  id, a small JSON attribute dict and one float32 tensor.
* ``MILS`` model checkpoint: JSON metadata (architecture, training config,
  seed, kind tag) followed by a named float32 tensor table.
* ``MILR`` random forest: JSON metadata followed by per-tree node arrays.
"""

from __future__ import annotations

import fcntl
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptStore, DuplicateId, NotFound, ParseError

MANIFEST_COLUMNS = ("path", "utterance_id", "label", "label_index", "speaker", "session", "fold",
                    "duration_seconds")


@dataclass
class ManifestRecord:
    path: str
    utterance_id: str
    label: str
    label_index: int
    speaker: str = ""
    session: str = ""
    fold: int = -1
    duration_seconds: float = 0.0


@dataclass
class Manifest:
    classes: list
    records: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.utterance_id in seen:
                raise DuplicateId(f"duplicate utterance id {rec.utterance_id!r}")
            seen.add(rec.utterance_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def n_classes(self):
        return len(self.classes)

    def ids(self):
        return [r.utterance_id for r in self.records]

    def by_id(self):
        return {r.utterance_id: r for r in self.records}


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["#classes", *manifest.classes]) + "\n")
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in manifest.records:
            row = [r.path, r.utterance_id, r.label, str(r.label_index), r.speaker, r.session,
                   str(r.fold), repr(float(r.duration_seconds))]
            for value in row:
                if "\t" in value or "\n" in value:
                    raise ValueError(f"field {value!r} contains a tab or newline")
            fh.write("\t".join(row) + "\n")


def read_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#classes"):
        raise ParseError("missing '#classes' header", 1)
    classes = lines[0].split("\t")[1:]
    if len(set(classes)) != len(classes) or not classes:
        raise ParseError("class table empty or has duplicates", 1)
    if len(lines) < 2 or tuple(lines[1].split("\t")) != MANIFEST_COLUMNS:
        raise ParseError(f"expected column header {MANIFEST_COLUMNS}", 2)
    index_of = {name: i for i, name in enumerate(classes)}
    records, seen = [], set()
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise ParseError(f"expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}", lineno)
        path_, uid, label, idx, speaker, session, fold, duration = parts
        if label not in index_of:
            raise ParseError(f"label {label!r} not in class table", lineno)
        try:
            idx, fold, duration = int(idx), int(fold), float(duration)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if idx != index_of[label]:
            raise ParseError(f"label index {idx} disagrees with class table ({index_of[label]})", lineno)
        if uid in seen:
            raise DuplicateId(f"duplicate utterance id {uid!r}", lineno)
        seen.add(uid)
        records.append(ManifestRecord(path_, uid, label, idx, speaker, session, fold, duration))
    return Manifest(classes, records)


# -- binary helpers --------------------------------------------------------------

def _pack_str(s: str, width="<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(width, len(raw)) + raw


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CorruptStore("unexpected end of file")
    return data


def _unpack_str(fh, width="<H") -> str:
    (n,) = struct.unpack(width, _read_exact(fh, struct.calcsize(width)))
    return _read_exact(fh, n).decode("utf-8")


def _pack_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _unpack_tensor(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def _check_header(fh, magic: bytes, versions) -> int:
    head = fh.read(len(magic) + 2)
    if len(head) != len(magic) + 2 or head[: len(magic)] != magic:
        raise CorruptStore(f"bad magic: expected {magic!r}")
    (version,) = struct.unpack("<H", head[len(magic):])
    if version not in versions:
        raise CorruptStore(f"unsupported {magic.decode()} version {version}")
    return version


# -- feature store -----------------------------------------------------------------

class FeatureStore:
    """Append-only container of float32 tensors keyed by id.

    The index is rebuilt by scanning record headers on open. A record only
    becomes visible once its length prefix and body are fully on disk; a torn
    trailing record left by an interrupted writer is dropped when the store is
    reopened for writing.
    """

    MAGIC = b"MILF"
    VERSION = 1

    def __init__(self, path, mode="r"):
        if mode not in ("r", "a", "w"):
            raise ValueError("mode must be 'r', 'a' or 'w'")
        self.path = Path(path)
        self.mode = mode
        self.index: dict[str, int] = {}
        if mode == "w" or (mode == "a" and not self.path.exists()):
            with open(self.path, "wb") as fh:
                fh.write(self.MAGIC + struct.pack("<H", self.VERSION))
        self._fh = open(self.path, "rb" if mode == "r" else "r+b")
        _check_header(self._fh, self.MAGIC, {self.VERSION})
        self._scan()

    def _scan(self):
        fh = self._fh
        size = os.fstat(fh.fileno()).st_size
        pos = len(self.MAGIC) + 2
        while pos + 4 <= size:
            fh.seek(pos)
            (length,) = struct.unpack("<I", fh.read(4))
            if pos + 4 + length > size:
                break
            rid = _unpack_str(fh)
            self.index[rid] = pos
            pos += 4 + length
        self._end = pos
        if pos != size and self.mode != "r":
            fh.truncate(pos)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __contains__(self, rid):
        return rid in self.index

    def __len__(self):
        return len(self.index)

    def ids(self):
        return list(self.index)

    def put(self, rid: str, tensor, attrs: dict | None = None) -> None:
        if self.mode == "r":
            raise PermissionError("store opened read-only")
        if rid in self.index:
            raise DuplicateId(f"record {rid!r} already stored")
        body = _pack_str(rid) + _pack_str(json.dumps(attrs or {}, sort_keys=True), "<I") + _pack_tensor(tensor)
        fcntl.flock(self._fh.fileno(), fcntl.LOCK_EX)
        try:
            self._fh.seek(self._end)
            self._fh.write(struct.pack("<I", len(body)) + body)
            self._fh.flush()
        finally:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
        self.index[rid] = self._end
        self._end += 4 + len(body)

    def get(self, rid: str) -> np.ndarray:
        return self.get_with_attrs(rid)[0]

    def get_with_attrs(self, rid: str):
        if rid not in self.index:
            raise NotFound(f"record {rid!r} not in {self.path}")
        fcntl.flock(self._fh.fileno(), fcntl.LOCK_SH)
        try:
            self._fh.seek(self.index[rid] + 4)
            _unpack_str(self._fh)
            attrs = json.loads(_unpack_str(self._fh, "<I"))
            return _unpack_tensor(self._fh), attrs
        finally:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)


def put_record(store: FeatureStore, rid, tensor, attrs=None):
    store.put(rid, tensor, attrs)
    return tensor


def get_record(store: FeatureStore, rid):
    return store.get(rid)


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MILS"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    """Write named float32 tensors plus a JSON metadata block (config echo, seed, kind)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(_pack_str(json.dumps(meta, sort_keys=True), "<I"))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        buf.write(_pack_str(name) + _pack_tensor(tensors[name]))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        _check_header(fh, CHECKPOINT_MAGIC, {CHECKPOINT_VERSION})
        meta = json.loads(_unpack_str(fh, "<I"))
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(n):
            name = _unpack_str(fh)
            tensors[name] = _unpack_tensor(fh)
    return tensors, meta


def save_model(path, model, train_config=None, extra=None) -> None:
    """Checkpoint a SegmentModel or AggregatorModel."""
    meta = {"architecture": model.architecture(), "seed": int(model.seed),
            "model": type(model).__name__, "train_config": train_config or {}}
    if hasattr(model, "kind"):
        meta["kind"] = model.kind
    if extra:
        meta.update(extra)
    save_checkpoint(path, dict(model.params), meta)


def load_model(path):
    from .attention import AggregatorModel
    from .neuralcore.segment import SegmentModel

    tensors, meta = load_checkpoint(path)
    arch = meta["architecture"]
    if meta["model"] == "SegmentModel":
        model = SegmentModel(arch["n_classes"], tuple(arch["input_shape"]), tuple(arch["body"]), seed=meta["seed"])
    elif meta["model"] == "AggregatorModel":
        model = AggregatorModel(arch["kind"], arch["n_features"], arch["n_classes"], arch["hidden"],
                                arch["feature_dim"], arch["masked"], seed=meta["seed"], t_max=arch.get("t_max"))
    else:
        raise CorruptStore(f"unknown model type {meta['model']!r}")
    params = model.params
    if set(params) != set(tensors):
        raise CorruptStore("checkpoint tensors do not match the architecture")
    for name, value in tensors.items():
        if params[name].shape != value.shape:
            raise CorruptStore(f"tensor {name} has shape {value.shape}, expected {params[name].shape}")
        params[name][...] = value
    return model, meta


# -- forests ----------------------------------------------------------------------------

FOREST_MAGIC = b"MILR"
FOREST_VERSION = 1


def save_forest(path, forest) -> None:
    buf = io.BytesIO()
    buf.write(FOREST_MAGIC + struct.pack("<H", FOREST_VERSION))
    meta = {"n_classes": forest.n_classes, "n_features": forest.n_features, "n_trees": forest.n_trees,
            "max_depth": forest.max_depth, "seed": int(forest.seed)}
    buf.write(_pack_str(json.dumps(meta, sort_keys=True), "<I"))
    buf.write(struct.pack("<I", len(forest.trees)))
    for t in forest.trees:
        buf.write(struct.pack("<I", t.n_nodes))
        buf.write(np.ascontiguousarray(t.feature, "<i4").tobytes())
        buf.write(np.ascontiguousarray(t.threshold, "<f8").tobytes())
        buf.write(np.ascontiguousarray(t.left, "<i4").tobytes())
        buf.write(np.ascontiguousarray(t.right, "<i4").tobytes())
        buf.write(np.ascontiguousarray(t.value, "<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_forest(path):
    from .baselines import RandomForest, Tree

    with open(path, "rb") as fh:
        _check_header(fh, FOREST_MAGIC, {FOREST_VERSION})
        meta = json.loads(_unpack_str(fh, "<I"))
        (n_trees,) = struct.unpack("<I", _read_exact(fh, 4))
        K = meta["n_classes"]
        trees = []
        for _ in range(n_trees):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))

            def arr(dtype, count):
                return np.frombuffer(_read_exact(fh, np.dtype(dtype).itemsize * count), dtype=dtype)

            feature = arr("<i4", n).astype(np.int64)
            threshold = arr("<f8", n).astype(np.float64)
            left = arr("<i4", n).astype(np.int64)
            right = arr("<i4", n).astype(np.int64)
            value = arr("<f8", n * K).reshape(n, K).astype(np.float64)
            trees.append(Tree(feature, threshold, left, right, value))
    return RandomForest(trees, K, meta["n_features"], meta["n_trees"], meta["max_depth"], meta["seed"])
