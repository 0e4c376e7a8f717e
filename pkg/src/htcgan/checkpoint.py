"""Self-describing checkpoint container shared by the synthesis and
segmentation models.

Layout: 4-byte magic, uint32 format version, uint32 header length, JSON
header (model kind, architecture hyperparameters, epoch, array manifest),
then the named arrays back to back as little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptFileError, UnsupportedFormatError

MAGIC = b"HTCK"
FORMAT_VERSION = 1


def save_model(path, kind: str, hparams: dict, state_dict, epoch: int = 0) -> None:
    """Write the container atomically (temp file + rename)."""
    arrays = []
    payloads = []
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy()
        arrays.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
        payloads.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps(
        {
            "kind": kind,
            "hparams": hparams,
            "epoch": epoch,
            "arrays": arrays,
        }
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for payload in payloads:
            fh.write(payload)
    os.replace(tmp, path)


def read_container(path):
    """Parse the container: (kind, hparams, epoch, {name: array})."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise UnsupportedFormatError(f"{path}: not a model checkpoint")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(f"{path}: unknown checkpoint version {version}")
    if len(raw) < 12 + header_len:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: bad header ({exc})") from exc
    offset = 12 + header_len
    state = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CorruptFileError(f"{path}: truncated payload at {entry['name']}")
        flat = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        state[entry["name"]] = flat.reshape(entry["shape"]).astype(entry["dtype"])
        offset += nbytes
    return header["kind"], header["hparams"], header.get("epoch", 0), state


def _load_state(model: torch.nn.Module, state: dict) -> None:
    tensors = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in state.items()}
    model.load_state_dict(tensors)


def save_synthesis(path, model) -> None:
    save_model(path, "synthesis", model.hparams, model.state_dict(), model.epoch)


def save_segmenter(path, model) -> None:
    save_model(path, "segmenter", model.hparams, model.state_dict(), model.epoch)


def load_model(path):
    """Rebuild whichever model kind the file declares."""
    from .segmentation import SegmenterModel
    from .synthesis import SynthesisModel

    kind, hparams, epoch, state = read_container(path)
    if kind == "synthesis":
        model = SynthesisModel(**hparams)
    elif kind == "segmenter":
        model = SegmenterModel(**hparams)
    else:
        raise UnsupportedFormatError(f"{path}: unknown model kind {kind!r}")
    _load_state(model, state)
    model.epoch = epoch
    model.eval()
    return model


def load_synthesis(path):
    model = load_model(path)
    if not hasattr(model, "gen_source_to_target"):
        raise UnsupportedFormatError(f"{path}: not a synthesis checkpoint")
    return model


def load_segmenter(path):
    model = load_model(path)
    if not hasattr(model, "net"):
        raise UnsupportedFormatError(f"{path}: not a segmenter checkpoint")
    return model
