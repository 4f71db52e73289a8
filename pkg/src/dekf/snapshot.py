"""Posterior snapshots: a portable text format and a compact binary one.

The text format starts with a small header naming the fields, followed by
one whitespace-separated record per entity::

    dekf-snapshot 1
    fields namespace index last_t dim mean[dim] cov_lower[dim*(dim+1)/2] ref_mean[dim] ref_cross[dim*dim] ref_cov_lower[dim*(dim+1)/2]
    count 2
    item 0 17 2 0.1 -0.3 ...

Symmetric blocks are written as their row-major lower triangle and floats in
their shortest round-trip representation, so reading a file back gives the
exact same posteriors. Records are sorted by ``(namespace, index)`` which
makes the output a deterministic function of the store contents.

The binary form is a ``.npz`` archive holding the same information as flat
arrays.
"""

import numpy as np

from .errors import SnapshotFormatError
from .filter import EntityPosterior
from .signal import EntityId

MAGIC = "dekf-snapshot"
VERSION = 1
FIELDS = (
    "namespace index last_t dim mean[dim] cov_lower[dim*(dim+1)/2] ref_mean[dim] "
    "ref_cross[dim*dim] ref_cov_lower[dim*(dim+1)/2]"
)


def _lower(S):
    return S[np.tril_indices(S.shape[0])]


def _from_lower(vals, k):
    S = np.zeros((k, k))
    rows, cols = np.tril_indices(k)
    S[rows, cols] = vals
    S[cols, rows] = vals
    return S


def _record_size(k):
    return k + k * (k + 1) // 2 + k + k * k + k * (k + 1) // 2


def _flatten(post):
    return np.concatenate([
        post.mean, _lower(post.cov), post.ref_mean, post.ref_cross.ravel(), _lower(post.ref_cov),
    ])


def _unflatten(vals, k, last_t):
    tri = k * (k + 1) // 2
    pos = 0

    def take(n):
        nonlocal pos
        out = vals[pos:pos + n]
        pos += n
        return out

    mean = take(k).copy()
    cov = _from_lower(take(tri), k)
    ref_mean = take(k).copy()
    ref_cross = take(k * k).reshape(k, k).copy()
    ref_cov = _from_lower(take(tri), k)
    return EntityPosterior(mean, cov, ref_mean, ref_cross, ref_cov, int(last_t))


def _ordered(entities):
    return sorted(entities.items(), key=lambda kv: (kv[0].namespace, kv[0].index))


def dumps(entities):
    """Text snapshot of a mapping ``EntityId -> EntityPosterior``."""
    lines = [f"{MAGIC} {VERSION}", f"fields {FIELDS}", f"count {len(entities)}"]
    for eid, post in _ordered(entities):
        if not eid.namespace or any(c.isspace() for c in eid.namespace):
            raise SnapshotFormatError(f"namespace {eid.namespace!r} cannot be written (empty or has whitespace)")
        vals = " ".join(repr(float(v)) for v in _flatten(post))
        lines.append(f"{eid.namespace} {eid.index} {post.last_t} {post.dim} {vals}")
    return "\n".join(lines) + "\n"


def loads(text):
    """Inverse of :func:`dumps`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 3:
        raise SnapshotFormatError("snapshot is truncated (missing header)")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise SnapshotFormatError(f"not a snapshot file (first line {lines[0]!r})")
    if head[1] != str(VERSION):
        raise SnapshotFormatError(f"unsupported snapshot version {head[1]}")
    if not lines[1].startswith("fields "):
        raise SnapshotFormatError("missing 'fields' header line")
    try:
        count = int(lines[2].split()[1])
    except (IndexError, ValueError):
        raise SnapshotFormatError("missing or malformed 'count' header line") from None
    records = lines[3:]
    if len(records) != count:
        raise SnapshotFormatError(f"header announces {count} records, found {len(records)}")
    out = {}
    for n, line in enumerate(records, start=4):
        parts = line.split()
        try:
            ns, idx, last_t, k = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
            vals = np.array([float(v) for v in parts[4:]])
        except (IndexError, ValueError) as exc:
            raise SnapshotFormatError(f"line {n}: {exc}") from None
        if vals.size != _record_size(k):
            raise SnapshotFormatError(f"line {n}: expected {_record_size(k)} values for dim {k}, got {vals.size}")
        eid = EntityId(ns, idx)
        if eid in out:
            raise SnapshotFormatError(f"line {n}: duplicate entity {eid}")
        out[eid] = _unflatten(vals, k, last_t)
    return out


def write_text(path, entities):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(entities))


def read_text(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save_state(path, entities):
    """Binary snapshot (``.npz``) with the same content as the text form."""
    ordered = _ordered(entities)
    # a file handle keeps numpy from appending ".npz" to the name
    with open(path, "wb") as fh:
        np.savez(
            fh,
            namespace=np.array([e.namespace for e, _ in ordered], dtype=str),
            index=np.array([e.index for e, _ in ordered], dtype=np.int64),
            last_t=np.array([p.last_t for _, p in ordered], dtype=np.int64),
            dim=np.array([p.dim for _, p in ordered], dtype=np.int64),
            values=np.concatenate([_flatten(p) for _, p in ordered]) if ordered else np.zeros(0),
        )


def load_state(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            ns, idx, last_t, dims, values = (z[f] for f in ("namespace", "index", "last_t", "dim", "values"))
    except KeyError as exc:
        raise SnapshotFormatError(f"state file lacks field {exc}") from None
    except (ValueError, OSError) as exc:
        raise SnapshotFormatError(f"cannot read state file: {exc}") from None
    sizes = [_record_size(int(k)) for k in dims]
    if sum(sizes) != values.size:
        raise SnapshotFormatError("state file value count does not match the declared dims")
    out = {}
    pos = 0
    for n, k, t, size, i in zip(ns, dims, last_t, sizes, idx):
        out[EntityId(str(n), int(i))] = _unflatten(values[pos:pos + size], int(k), int(t))
        pos += size
    return out
