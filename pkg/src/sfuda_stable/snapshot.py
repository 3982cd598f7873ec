"""Frozen copies of model parameters and their on-disk format.

File layout (``SFUDA-SNAP v1``)::

    SFUDA-SNAP v1\n
    meta <json>\n                      # architecture descriptor, free-form
    entries <count>\n
    <kind>\t<name>\t<d0,d1,...>\t<nbytes>\n<raw little-endian float32 bytes>
    ...                                 # one record per entry
    sha256 <hex digest of all payload bytes in order>\n

``kind`` is ``param`` for trainable parameters and ``buffer`` for BN running
statistics. Only ``param`` entries take part in the consolidation penalty.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
import torch
from torch import nn

MAGIC = b"SFUDA-SNAP v1"


@dataclass
class ParameterSnapshot:
    """Ordered, detached copies of named parameters (plus optional buffers)."""

    params: list[tuple[str, torch.Tensor]]
    buffers: list[tuple[str, torch.Tensor]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("snapshot parameter names must be unique")

    @classmethod
    def from_model(cls, model: nn.Module, meta: dict | None = None) -> "ParameterSnapshot":
        params = [(n, p.detach().clone()) for n, p in model.named_parameters()]
        buffers = [
            (n, b.detach().clone())
            for n, b in model.named_buffers()
            if b.is_floating_point()
        ]
        if meta is None:
            meta = dict(getattr(model, "descriptor_dict", lambda: {})())
        return cls(params, buffers, meta)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.params]

    def num_scalars(self) -> int:
        return sum(t.numel() for _, t in self.params)

    def to(self, dtype: torch.dtype) -> "ParameterSnapshot":
        return ParameterSnapshot(
            [(n, t.to(dtype)) for n, t in self.params],
            [(n, t.to(dtype)) for n, t in self.buffers],
            dict(self.meta),
        )

    def restore_into(self, model: nn.Module) -> nn.Module:
        """Copy snapshot values into ``model`` in place (structure must match)."""
        live = dict(model.named_parameters())
        bufs = dict(model.named_buffers())
        check_structure(
            list(model.named_parameters()), self
        )
        with torch.no_grad():
            for name, value in self.params:
                live[name].copy_(value)
            for name, value in self.buffers:
                if name not in bufs:
                    raise ValueError(f"buffer {name!r} not present in model")
                bufs[name].copy_(value)
        return model

    def equals(self, other: "ParameterSnapshot") -> bool:
        if self.names != other.names or [n for n, _ in self.buffers] != [n for n, _ in other.buffers]:
            return False
        pairs = list(zip(self.params, other.params)) + list(zip(self.buffers, other.buffers))
        return all(torch.equal(a, b) for (_, a), (_, b) in pairs)


def check_structure(theta: Iterable[tuple[str, torch.Tensor]], theta_star: ParameterSnapshot) -> None:
    """Raise ValueError naming the first entry where ``theta`` and the snapshot disagree."""
    theta = list(theta)
    for index, ((name, value), (ref_name, ref)) in enumerate(zip(theta, theta_star.params)):
        if name != ref_name:
            raise ValueError(f"parameter #{index}: name {name!r} does not match snapshot entry {ref_name!r}")
        if tuple(value.shape) != tuple(ref.shape):
            raise ValueError(
                f"parameter {name!r}: shape {tuple(value.shape)} does not match snapshot shape {tuple(ref.shape)}"
            )
    if len(theta) != len(theta_star.params):
        index = min(len(theta), len(theta_star.params))
        missing = theta[index][0] if len(theta) > index else theta_star.params[index][0]
        raise ValueError(
            f"parameter count {len(theta)} does not match snapshot count {len(theta_star.params)}; "
            f"first unmatched entry {missing!r}"
        )


def save_snapshot(snapshot: ParameterSnapshot, path: str | os.PathLike) -> None:
    digest = hashlib.sha256()
    records = [("param", n, t) for n, t in snapshot.params] + [("buffer", n, t) for n, t in snapshot.buffers]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(b"meta " + json.dumps(snapshot.meta, sort_keys=True).encode() + b"\n")
        fh.write(f"entries {len(records)}\n".encode())
        for kind, name, tensor in records:
            if "\t" in name or "\n" in name:
                raise ValueError(f"entry name {name!r} contains a separator character")
            payload = tensor.detach().cpu().numpy().astype("<f4").tobytes()
            shape = ",".join(str(d) for d in tensor.shape)
            fh.write(f"{kind}\t{name}\t{shape}\t{len(payload)}\n".encode())
            fh.write(payload)
            digest.update(payload)
        fh.write(f"sha256 {digest.hexdigest()}\n".encode())
    os.replace(tmp, path)


def load_snapshot(path: str | os.PathLike) -> ParameterSnapshot:
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != MAGIC:
            raise ValueError(f"{path}: not a snapshot file (bad header)")
        meta_line = fh.readline()
        if not meta_line.startswith(b"meta "):
            raise ValueError(f"{path}: missing meta record")
        meta = json.loads(meta_line[5:])
        count_line = fh.readline().split()
        if len(count_line) != 2 or count_line[0] != b"entries":
            raise ValueError(f"{path}: missing entry count")
        digest = hashlib.sha256()
        params, buffers = [], []
        for _ in range(int(count_line[1])):
            header = fh.readline().rstrip(b"\n").decode().split("\t")
            if len(header) != 4:
                raise ValueError(f"{path}: malformed entry header {header!r}")
            kind, name, shape_text, nbytes = header
            shape = tuple(int(d) for d in shape_text.split(",")) if shape_text else ()
            payload = fh.read(int(nbytes))
            if len(payload) != int(nbytes):
                raise ValueError(f"{path}: truncated payload for {name!r}")
            digest.update(payload)
            values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            if values.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"{path}: value count for {name!r} does not match shape {shape}")
            tensor = torch.from_numpy(values.reshape(shape).copy())
            (params if kind == "param" else buffers).append((name, tensor))
        trailer = fh.readline().split()
        if len(trailer) != 2 or trailer[0] != b"sha256":
            raise ValueError(f"{path}: missing checksum trailer")
        if trailer[1].decode() != digest.hexdigest():
            raise ValueError(f"{path}: checksum mismatch")
    return ParameterSnapshot(params, buffers, meta)
