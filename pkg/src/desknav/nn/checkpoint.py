"""Binary checkpoint: header, little-endian parameters, Adam moments."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import Adam
from .policy import PolicyNet, policy_config_from_dict

MAGIC = b"DNCK"
VERSION = 1
_HEAD = struct.Struct("<4sII")  # magic, version, json length


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: PolicyNet, opt: Adam | None = None, meta: dict | None = None):
    header = {
        "arch": net.arch_dict(),
        "arch_hash": net.arch_hash(),
        "n_params": net.n_params(),
        "adam_t": opt.t if opt is not None else 0,
        "has_moments": opt is not None,
        "ret_norm": net.ret_norm.state(),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, default=list).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        f.write(net.flat_params().astype("<f8").tobytes())
        if opt is not None:
            f.write(np.concatenate([m.ravel() for m in opt.m]).astype("<f8").tobytes())
            f.write(np.concatenate([v.ravel() for v in opt.v]).astype("<f8").tobytes())
    tmp.replace(path)


def read_header(path):
    with open(path, "rb") as f:
        raw = f.read(_HEAD.size)
        if len(raw) < _HEAD.size:
            raise CheckpointError("truncated checkpoint header")
        magic, ver, n = _HEAD.unpack(raw)
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint (magic {magic!r})")
        if ver != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {ver}")
        header = json.loads(f.read(n).decode())
        return header, f.read()


def load_checkpoint(path, net: PolicyNet | None = None, opt: Adam | None = None):
    """Load into ``net`` (built from the header when None). Returns (net, header)."""
    header, body = read_header(path)
    if net is None:
        net = PolicyNet(policy_config_from_dict(header["arch"]))
    if header["arch_hash"] != net.arch_hash():
        raise CheckpointError(
            f"architecture hash mismatch: file {header['arch_hash']}, network {net.arch_hash()}")
    n = net.n_params()
    arr = np.frombuffer(body, dtype="<f8")
    want = n * (3 if header["has_moments"] else 1)
    if arr.size != want:
        raise CheckpointError(f"payload has {arr.size} values, expected {want}")
    net.set_flat_params(arr[:n].astype(np.float64))
    net.ret_norm.load(header["ret_norm"])
    if opt is not None and header["has_moments"]:
        i = n
        for buf in (opt.m, opt.v):
            for m in buf:
                m[...] = arr[i:i + m.size].reshape(m.shape)
                i += m.size
        opt.t = int(header["adam_t"])
    return net, header
