"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"CDSRCKPT"
    version      uint32    1
    header_len   uint32    byte length of the header text
    header       UTF-8     "key=value" lines: the ArchitectureConfig
                           fields (multipliers comma-separated) and T
    n_tensors    uint32
    n_tensors times:
        name_len uint16, name (UTF-8)
        ndim     uint8,  dims (ndim x uint32)
        data     float32 x prod(dims), C order

Tensors appear in the model's ``named_parameters`` order. The file holds
no timestamps, so identical parameters give identical bytes.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .denoiser import ArchitectureConfig, UNet

MAGIC = b"CDSRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(config: ArchitectureConfig, T: int) -> bytes:
    fields = config.to_dict()
    fields["channel_multipliers"] = ",".join(str(m) for m in fields["channel_multipliers"])
    fields["T"] = T
    return "".join(f"{k}={v}\n" for k, v in fields.items()).encode("utf-8")


def save_checkpoint(path, config: ArchitectureConfig, T: int, params) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    header = _header(config, T)
    chunks += [struct.pack("<I", len(header)), header, struct.pack("<I", len(params))]
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Return ``(config, T, params)``; params are float32 tensors."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    fields = dict(line.split("=", 1) for line in r.take(hlen).decode("utf-8").splitlines() if line)
    try:
        T = int(fields.pop("T"))
        config = ArchitectureConfig(
            base_channels=int(fields["base_channels"]),
            channel_multipliers=tuple(int(m) for m in fields["channel_multipliers"].split(",")),
            num_res_blocks=int(fields["num_res_blocks"]),
            time_embedding_dim=int(fields["time_embedding_dim"]),
            image_channels=int(fields["image_channels"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc

    (count,) = r.unpack("<I")
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        params[name] = torch.tensor(arr.astype(np.float32))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after tensors")

    expected = UNet(config, T).param_shapes()
    found = OrderedDict((n, tuple(p.shape)) for n, p in params.items())
    if expected != found:
        raise CheckpointError(f"{path}: tensors do not match the architecture in the header")
    return config, T, params
