"""Binary checkpoints for encoders, task heads and bridges.

Layout::

    b"MBCK" | uint16 version | uint32 header length | JSON header
    float64 little-endian parameter blocks, in header order
    [ b"MBBR" | uint32 header length | JSON bridge header | A, B, P blocks ]

The JSON header holds the modality tag, input shape, layer specs and the
name and shape of every block, so a file can be inspected without numpy.
All float blocks round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bridge import BridgeParams, BridgeShapeSpec
from .models import EncoderModel, LayerSpec, TaskHead

CHECKPOINT_MAGIC = b"MBCK"
BRIDGE_MAGIC = b"MBBR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dump(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def _blocks(arrays: list[tuple[str, np.ndarray]]) -> tuple[list[dict], bytes]:
    meta = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    raw = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return meta, raw


def encode_checkpoint(model: EncoderModel, head: TaskHead | None = None,
                      bridge: BridgeParams | None = None) -> bytes:
    arrays = [(f"layers.{i}.{name}", p.data) for i, layer in enumerate(model.layers)
              for name, p in layer.params.items()]
    if head is not None:
        arrays += [("head.weight", head.weight.data), ("head.bias", head.bias.data)]
    meta, raw = _blocks(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "modality": model.modality,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.specs],
        "has_head": head is not None,
        "blocks": meta,
    }
    head_raw = _dump(header)
    out = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(head_raw)) + head_raw + raw
    if bridge is not None:
        bmeta, braw = _blocks([("A", bridge.A.data), ("B", bridge.B.data), ("P", bridge.P.data)])
        bheader = _dump({"spec": asdict(bridge.spec), "blocks": bmeta})
        out += BRIDGE_MAGIC + struct.pack("<I", len(bheader)) + bheader + braw
    return out


def _read_blocks(buf: bytes, offset: int, meta: list[dict]) -> tuple[dict[str, np.ndarray], int]:
    arrays = {}
    for block in meta:
        count = int(np.prod(block["shape"], dtype=np.int64))
        if offset + 8 * count > len(buf):
            raise CheckpointError("checkpoint is truncated")
        arrays[block["name"]] = np.frombuffer(buf, "<f8", count, offset).reshape(block["shape"]).astype(np.float64)
        offset += 8 * count
    return arrays, offset


def decode_checkpoint(buf: bytes) -> tuple[EncoderModel, TaskHead | None, BridgeParams | None]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[10 : 10 + hlen])
    arrays, offset = _read_blocks(buf, 10 + hlen, header["blocks"])
    specs = [LayerSpec(d["kind"], d["hparams"]) for d in header["layers"]]
    params = [{k.split(".", 2)[2]: v for k, v in arrays.items() if k.startswith(f"layers.{i}.")}
              for i in range(len(specs))]
    model = EncoderModel(specs, tuple(header["input_shape"]), header["modality"], params=params)
    head = None
    if header["has_head"]:
        w = arrays["head.weight"]
        head = TaskHead(w.shape[0], w.shape[1], weight=w, bias=arrays["head.bias"])
    bridge = None
    if offset < len(buf):
        if buf[offset : offset + 4] != BRIDGE_MAGIC:
            raise CheckpointError("unexpected trailing bytes in checkpoint")
        (blen,) = struct.unpack_from("<I", buf, offset + 4)
        start = offset + 8
        bheader = json.loads(buf[start : start + blen])
        barrays, offset = _read_blocks(buf, start + blen, bheader["blocks"])
        bridge = BridgeParams(BridgeShapeSpec(**bheader["spec"]), barrays["A"], barrays["B"], barrays["P"])
        if offset != len(buf):
            raise CheckpointError("unexpected trailing bytes after bridge section")
    return model, head, bridge


def save_checkpoint(path, model: EncoderModel, head: TaskHead | None = None,
                    bridge: BridgeParams | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, head, bridge))


def load_checkpoint(path) -> tuple[EncoderModel, TaskHead | None, BridgeParams | None]:
    return decode_checkpoint(Path(path).read_bytes())
