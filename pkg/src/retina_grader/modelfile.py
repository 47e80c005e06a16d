"""Versioned binary container for a trained network.

Layout (all integers little-endian)::

    magic     8 bytes  b"RGMODEL\\0"
    version   u8       FORMAT_VERSION
    meta_len  u32      length of the UTF-8 metadata block
    meta      bytes    "network = <spec text>\\npreprocessing = <text>\\n"
    count     u32      number of parameter tensors
    tensor*   key_len u16, key (ASCII "<layer>.<name>"), rank u8,
              rank x u32 dims, prod(dims) x f64 row-major
    digest    32 bytes SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, IntegrityError, ParseError, ShapeError, UsageError
from .morph import PreprocSpec, StructuringElement
from .nn import Network, NetworkSpec

MAGIC = b"RGMODEL\0"
FORMAT_VERSION = 1
_DIGEST = 32


def preproc_to_text(p: PreprocSpec) -> str:
    w, h = p.target_size
    return (f"size={w}x{h};threshold={p.threshold!r};se={p.se.to_text()};"
            f"order={','.join(p.order)}")


def preproc_from_text(text: str) -> PreprocSpec:
    try:
        fields = dict(part.split("=", 1) for part in text.strip().split(";"))
        w, h = (int(v) for v in fields["size"].split("x"))
        return PreprocSpec((w, h), float(fields["threshold"]),
                           StructuringElement.parse(fields["se"]), tuple(fields["order"].split(",")))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad preprocessing description {text!r}: {exc}") from None


@dataclass
class ModelFile:
    net_spec: NetworkSpec
    preproc: PreprocSpec
    state: dict

    @classmethod
    def from_network(cls, net: Network, preproc: PreprocSpec):
        return cls(net.spec, preproc, net.state_dict())

    def network(self) -> Network:
        net = Network(self.net_spec)
        net.load_state_dict(self.state)
        return net

    def to_bytes(self) -> bytes:
        meta = (f"network = {self.net_spec.to_text()}\n"
                f"preprocessing = {preproc_to_text(self.preproc)}\n").encode("utf-8")
        out = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(meta)), meta,
               struct.pack("<I", len(self.state))]
        for key in sorted(self.state, key=_key_order):
            arr = np.ascontiguousarray(self.state[key], dtype="<f8")
            k = key.encode("ascii")
            out.append(struct.pack("<H", len(k)) + k)
            out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        body = b"".join(out)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes, path=None):
        if len(data) < len(MAGIC) + 1 + _DIGEST or data[: len(MAGIC)] != MAGIC:
            raise IntegrityError(f"{path or 'model'}: not a model file")
        body, digest = data[:-_DIGEST], data[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise IntegrityError(f"{path or 'model'}: checksum mismatch (file corrupted)")
        version = body[len(MAGIC)]
        if version != FORMAT_VERSION:
            raise IntegrityError(
                f"{path or 'model'}: format version {version}, this build reads {FORMAT_VERSION}"
            )
        try:
            pos = len(MAGIC) + 1
            (meta_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            meta = body[pos : pos + meta_len].decode("utf-8")
            pos += meta_len
            fields = dict(line.split(" = ", 1) for line in meta.splitlines() if line)
            spec = NetworkSpec.from_text(fields["network"])
            preproc = preproc_from_text(fields["preprocessing"])
            (count,) = struct.unpack_from("<I", body, pos)
            pos += 4
            state = {}
            for _ in range(count):
                (klen,) = struct.unpack_from("<H", body, pos)
                pos += 2
                key = body[pos : pos + klen].decode("ascii")
                pos += klen
                rank = body[pos]
                dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
                pos += 1 + 4 * rank
                n = int(np.prod(dims, dtype=np.int64))
                state[key] = np.frombuffer(body, "<f8", n, pos).reshape(dims).astype(np.float64)
                pos += 8 * n
            if pos != len(body):
                raise ValueError("trailing bytes after parameters")
        except (struct.error, KeyError, ValueError, IndexError, UnicodeDecodeError) as exc:
            raise IntegrityError(f"{path or 'model'}: malformed model file ({exc})") from None
        model = cls(spec, preproc, state)
        try:
            model.network()
        except (UsageError, ShapeError) as exc:
            raise IntegrityError(f"{path or 'model'}: parameters do not fit the network ({exc})") from None
        return model


def _key_order(key):
    layer, name = key.split(".", 1)
    return int(layer), name


def save_model(path, model: ModelFile):
    try:
        with open(path, "wb") as fh:
            fh.write(model.to_bytes())
    except OSError as exc:
        raise DataError(f"cannot write model {path}: {exc}") from None


def load_model(path) -> ModelFile:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    return ModelFile.from_bytes(data, path)
