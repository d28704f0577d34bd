"""
ARWK checkpoint format

    magic "ARWK" | u32 version | u32 config length | config bytes (key=value text)
    then records until EOF:
    u16 name length | name bytes (utf-8) | u8 rank | u32 dims[rank] | f32 data

All integers and floats are little-endian.
"""

import io
import logging
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Mapping, Tuple, Union

import numpy as np
import torch

from app.exceptions import FormatError
from app.models import ModelConfig
from app.utils.binio import ByteReader, write_dims, write_f32, write_scalar
from app.utils.config_io import config_from_text, config_to_text

logger = logging.getLogger(__name__)

MAGIC = b"ARWK"
VERSION = 1


def write_checkpoint(sink: BinaryIO, cfg: ModelConfig, state: Mapping[str, torch.Tensor]) -> None:
    blob = config_to_text(cfg).encode("utf-8")
    sink.write(MAGIC)
    write_scalar(sink, "<u4", VERSION)
    write_scalar(sink, "<u4", len(blob))
    sink.write(blob)
    for name, tensor in state.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long for a checkpoint record: {name[:40]}...")
        values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        if values.ndim > 0xFF:
            raise FormatError(f"tensor '{name}' has rank {values.ndim}, at most 255 supported")
        write_scalar(sink, "<u2", len(encoded))
        sink.write(encoded)
        write_scalar(sink, "<u1", values.ndim)
        write_dims(sink, values.shape)
        write_f32(sink, values)


def read_checkpoint(source: BinaryIO, label: str = "checkpoint") -> Tuple[ModelConfig, "OrderedDict[str, torch.Tensor]"]:
    """
    Parse a checkpoint stream

    Raises:
        FormatError: bad magic, unsupported version or truncation, with the byte offset
    """
    reader = ByteReader(source.read(), label)
    reader.magic(MAGIC)
    start = reader.offset
    version = reader.scalar("<u4", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=start)
    blob_len = reader.scalar("<u4", "config length")
    blob_start = reader.offset
    try:
        text = reader.take(blob_len, "config").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("config blob is not valid utf-8", offset=blob_start) from e
    cfg = config_from_text(text, ModelConfig)

    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    while not reader.at_end():
        record_start = reader.offset
        name_len = reader.scalar("<u2", "name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("tensor name is not valid utf-8", offset=record_start) from e
        rank = reader.scalar("<u1", f"rank of '{name}'")
        dims = tuple(int(x) for x in reader.array("<u4", rank, f"dims of '{name}'"))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = reader.array("<f4", count, f"data of '{name}'")
        state[name] = torch.from_numpy(data.astype(np.float32)).reshape(dims)
    return cfg, state


def save_checkpoint(path: Union[str, Path], cfg: ModelConfig, state: Mapping[str, torch.Tensor]) -> Path:
    """Write a checkpoint file atomically (temp file then rename)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    write_checkpoint(buffer, cfg, state)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)
    logger.info("💾 Saved checkpoint %s (%d tensors)", path, len(state))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelConfig, "OrderedDict[str, torch.Tensor]"]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    logger.info("📥 Loading checkpoint %s", path)
    with path.open("rb") as f:
        return read_checkpoint(f, label=str(path))
