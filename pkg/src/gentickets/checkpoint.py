"""Single-file checkpoints for weights, masks, optimizer moments and tickets.

Layout (all integers little-endian)::

    b"GTCK"  u32 version  u32 n_records
    n_records x [ u32 name_len  name(utf-8)  u8 dtype  u32 ndim  u64 dims[ndim]  u64 nbytes  payload ]
    32-byte sha256 of everything above

``dtype`` is 0 for float64, 1 for uint8, 2 for int64 and 3 for UTF-8 JSON
text.  Writes go to a temporary file that is renamed into place.
"""

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, VersionError

MAGIC = b"GTCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
_JSON = 3


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    mask: dict | None = None
    optimizer: dict | None = None

    @property
    def config(self):
        return self.meta.get("config")

    @property
    def rewind_iteration(self):
        return self.meta.get("rewind_iteration")


def _encode(name, value):
    nb = name.encode("utf-8")
    if isinstance(value, (dict, list)):
        payload = json.dumps(value, sort_keys=True).encode("utf-8")
        code, shape = _JSON, ()
    else:
        a = np.asarray(value)
        if a.dtype in (np.bool_, np.uint8):
            a, code = a.astype("u1"), 1
        elif a.dtype.kind in "iu":
            a, code = a.astype("<i8"), 2
        elif a.dtype.kind == "f":
            a, code = a.astype("<f8"), 0
        else:
            raise FormatError(f"cannot store {name!r} of dtype {a.dtype}")
        shape = a.shape
        payload = np.ascontiguousarray(a).tobytes()
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, len(shape))
    head += struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<Q", len(payload))
    return head + payload


def _records(ck):
    yield "meta", ck.meta
    for k, a in ck.params.items():
        yield f"param/{k}", a
    for k, a in (ck.mask or {}).items():
        yield f"mask/{k}", a
    for k, a in (ck.optimizer or {}).items():
        yield f"opt/{k}", a


def dumps(ck):
    recs = list(_records(ck))
    body = MAGIC + struct.pack("<II", VERSION, len(recs)) + b"".join(_encode(n, v) for n, v in recs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, net=None, mask=None, optimizer=None, rewind_iteration=None, meta=None, state=None):
    """Write a checkpoint atomically.

    ``state`` (name -> array) overrides ``net.state_dict()``.  ``mask`` is
    a :class:`~gentickets.pruning.Mask` or a plain dict; ``optimizer`` is
    an :class:`~gentickets.optim.OptimizerState` or a dict of arrays.
    """
    info = dict(meta or {})
    if net is not None:
        info.setdefault("config", net.config.to_dict())
    if rewind_iteration is not None:
        info["rewind_iteration"] = int(rewind_iteration)
    entries = None
    if mask is not None:
        entries = dict(getattr(mask, "entries", mask))
        if hasattr(mask, "scope"):
            info["mask_scope"] = mask.scope
    opt = None
    if optimizer is not None:
        if hasattr(optimizer, "arrays"):
            opt = optimizer.arrays()
            info["optimizer"] = {"lr": optimizer.lr, "betas": list(optimizer.betas), "eps": optimizer.eps,
                                 "clip": optimizer.clip, "step": optimizer.step}
        else:
            opt = dict(optimizer)
    params = state if state is not None else (net.state_dict() if net is not None else {})
    data = dumps(Checkpoint(meta=info, params=dict(params), mask=entries, optimizer=opt))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def loads(raw):
    if len(raw) < 12 + 32:
        raise CorruptionError("checkpoint truncated", offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checksum mismatch", offset=len(body))
    ck = Checkpoint(meta={}, params={})
    pos = 12
    try:
        for _ in range(count):
            start = pos
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            payload = body[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise CorruptionError(f"record {name!r} truncated", offset=start)
            pos += nbytes
            if code == _JSON:
                value = json.loads(payload.decode("utf-8"))
            elif code in _DTYPES:
                value = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
            else:
                raise FormatError(f"record {name!r} has unknown dtype code {code}", offset=start)
            kind, _, key = name.partition("/")
            if kind == "meta":
                ck.meta = value
            elif kind == "param":
                ck.params[key] = value
            elif kind == "mask":
                ck.mask = ck.mask or {}
                ck.mask[key] = value
            elif kind == "opt":
                ck.optimizer = ck.optimizer or {}
                ck.optimizer[key] = value
            else:
                raise FormatError(f"unknown record {name!r}", offset=start)
    except struct.error as e:
        raise CorruptionError(f"record header truncated: {e}", offset=pos) from e
    if pos != len(body):
        raise CorruptionError("trailing bytes after the last record", offset=pos)
    return ck


def load_checkpoint(path):
    """Read and verify a checkpoint; nothing is returned unless the checksum holds."""
    return loads(Path(path).read_bytes())


def restore_optimizer(ck):
    """Rebuild an :class:`~gentickets.optim.OptimizerState` from a checkpoint."""
    from .optim import OptimizerState

    info = ck.meta.get("optimizer")
    if info is None or ck.optimizer is None:
        return None
    st = OptimizerState(lr=info["lr"], betas=tuple(info["betas"]), eps=info["eps"], clip=info["clip"],
                        step=info["step"])
    for k, a in ck.optimizer.items():
        which, _, name = k.partition("/")
        (st.m if which == "m" else st.v)[name] = a
    return st


# ---------------------------------------------------------------- tickets

def save_ticket(path, ticket):
    """Persist a ticket's mask, rewind weights and bookkeeping."""
    meta = {"config": ticket.model.to_dict(), "round": ticket.round, "seed": ticket.seed,
            "label": ticket.label}
    return save_checkpoint(path, mask=ticket.mask, rewind_iteration=ticket.rewind_iteration, meta=meta,
                           state=ticket.rewind_weights)


def load_ticket(path):
    from .models import ModelConfig
    from .pruning import Mask, TicketState

    ck = load_checkpoint(path)
    m = ck.meta
    mask = Mask(ck.mask or {}, m.get("mask_scope", "both_components"))
    return TicketState(mask=mask, rewind_weights=ck.params, rewind_iteration=m["rewind_iteration"],
                       round=m["round"], model=ModelConfig(**m["config"]), seed=m["seed"],
                       label=m.get("label", "winning"))
