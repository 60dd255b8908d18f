"""Versioned checkpoint container.

Layout::

    b"SEMIPAIRED-CKPT\\n"            magic
    uint32 little-endian            format version
    uint64 little-endian            header length in bytes
    header                          UTF-8 JSON, sorted keys
    payload                         raw little-endian tensor bytes

The header lists every tensor by name with dtype, shape and byte offset, plus
arbitrary JSON metadata (config, RNG states, optimizer hyper-parameters).
Tensors are written in sorted-name order and the JSON is canonical, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .core import DataError

MAGIC = b"SEMIPAIRED-CKPT\n"
VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NP = {name: np.dtype(name) for name in _DTYPES.values()}


def write_container(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for tensor {name}")
        raw = t.numpy().astype(_NP[_DTYPES[t.dtype]].newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_container(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise DataError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", data, pos)
        pos += struct.calcsize("<IQ")
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[pos : pos + hlen].decode())
        pos += hlen
        tensors = {}
        for e in header["tensors"]:
            start = pos + e["offset"]
            raw = data[start : start + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise DataError(f"{path}: truncated tensor {e['name']}")
            arr = np.frombuffer(raw, dtype=_NP[e["dtype"]].newbyteorder("<")).reshape(e["shape"])
            tensors[e["name"]] = torch.from_numpy(arr.astype(_NP[e["dtype"]], copy=True))
    except DataError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise DataError(f"corrupt checkpoint {path}: {e}") from e
    return tensors, header["meta"]


def optimizer_to_container(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors, scalars = {}, {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                tensors[f"{prefix}/{idx}/{k}"] = v
            else:
                scalars[f"{idx}/{k}"] = v
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, {"param_groups": groups, "scalars": scalars}


def optimizer_from_container(opt: torch.optim.Optimizer, prefix: str, tensors: dict, meta: dict) -> None:
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        if name.startswith(prefix + "/"):
            idx, key = name[len(prefix) + 1 :].split("/", 1)
            state.setdefault(int(idx), {})[key] = t
    for name, v in meta.get("scalars", {}).items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = v
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
