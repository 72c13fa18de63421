"""Frame protocol, server side.

Byte-identical to the optimizer's client protocol:

    [4-byte LE unsigned length][header JSON, UTF-8]\\n[payload]

The length counts header + newline + payload; payloads are little-endian
float32, exactly prod(tensor_shape) * 4 bytes. Kinds: score_request,
score_response, error. A request with view conditioning is followed by one
continuation frame carrying the reference image (conditioning type
"view_image").

Fixture keys are sha256 over the canonical request: JSON with sorted keys
and compact separators of {conditioning, dtype, guidance_scale, shape,
timestep, version}, then a newline byte, then the raw latent payload, and
for view conditioning another newline plus the reference-image payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

PROTOCOL_VERSION = 1

KIND_REQUEST = "score_request"
KIND_RESPONSE = "score_response"
KIND_ERROR = "error"


class FrameError(Exception):
    """Malformed frame; carries a short machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class Request:
    """Parsed request plus the raw payload bytes needed for digests."""

    shape: tuple
    timestep: int
    guidance_scale: float
    conditioning: dict
    payload: bytes
    ref_shape: tuple | None = None
    ref_payload: bytes | None = None

    @property
    def latent(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype="<f4").reshape(self.shape)

    @property
    def ref_image(self) -> np.ndarray | None:
        if self.ref_payload is None:
            return None
        return np.frombuffer(self.ref_payload, dtype="<f4").reshape(self.ref_shape)

    def digest(self) -> str:
        canonical = {
            "conditioning": self.conditioning,
            "dtype": "f32",
            "guidance_scale": float(self.guidance_scale),
            "shape": [int(s) for s in self.shape],
            "timestep": int(self.timestep),
            "version": PROTOCOL_VERSION,
        }
        h = hashlib.sha256()
        h.update(json.dumps(canonical, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        h.update(b"\n")
        h.update(self.payload)
        if self.ref_payload is not None:
            h.update(b"\n")
            h.update(self.ref_payload)
        return h.hexdigest()


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise EOFError("stream closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream, max_frame_bytes: int):
    """One (header, payload) off the stream; None on clean EOF."""
    prefix = stream.read(4)
    if not prefix:
        return None
    if len(prefix) < 4:
        prefix += _read_exact(stream, 4 - len(prefix))
    (length,) = struct.unpack("<I", prefix)
    if length > max_frame_bytes:
        raise FrameError("frame_too_large", f"declared length {length} exceeds limit")
    body = _read_exact(stream, length)
    newline = body.find(b"\n")
    if newline < 0:
        raise FrameError("bad_frame", "missing header terminator")
    try:
        header = json.loads(body[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FrameError("bad_header", "header is not valid JSON") from None
    if not isinstance(header, dict):
        raise FrameError("bad_header", "header is not an object")
    if header.get("version") != PROTOCOL_VERSION:
        raise FrameError("bad_version", f"unsupported version {header.get('version')!r}")
    return header, body[newline + 1:]


def _checked_shape(header, payload, max_frame_bytes) -> tuple:
    shape = header.get("tensor_shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FrameError("bad_shape", "tensor_shape must be a list of nonnegative ints")
    expected = 4
    for s in shape:
        expected *= s
        if expected > max_frame_bytes:  # bound before trusting the product
            raise FrameError("frame_too_large", "tensor_shape exceeds size limit")
    expected = int(np.prod(shape)) * 4 if shape else 0
    if len(payload) != expected:
        raise FrameError("bad_payload",
                         f"payload {len(payload)} bytes, shape promises {expected}")
    return tuple(shape)


def read_request(stream, max_frame_bytes: int) -> Request | None:
    """Full request (with the view continuation frame when due); None on EOF."""
    frame = read_frame(stream, max_frame_bytes)
    if frame is None:
        return None
    header, payload = frame
    if header.get("kind") != KIND_REQUEST:
        raise FrameError("bad_kind", f"expected {KIND_REQUEST}, got {header.get('kind')!r}")
    shape = _checked_shape(header, payload, max_frame_bytes)
    conditioning = header.get("conditioning")
    if not isinstance(conditioning, dict) or "type" not in conditioning:
        raise FrameError("bad_conditioning", "missing conditioning object")
    try:
        timestep = int(header["timestep"])
        guidance = float(header["guidance_scale"])
    except (KeyError, TypeError, ValueError):
        raise FrameError("bad_header", "timestep/guidance_scale missing or invalid") from None
    request = Request(shape, timestep, guidance, conditioning, payload)
    if conditioning.get("type") == "view":
        rot = conditioning.get("rotation")
        trans = conditioning.get("translation")
        if not (isinstance(rot, list) and len(rot) == 9
                and isinstance(trans, list) and len(trans) == 3):
            raise FrameError("bad_conditioning", "view conditioning needs rotation[9] and translation[3]")
        cont = read_frame(stream, max_frame_bytes)
        if cont is None:
            raise FrameError("bad_frame", "view request missing its reference-image frame")
        ref_header, ref_payload = cont
        if ref_header.get("kind") != KIND_REQUEST or \
                ref_header.get("conditioning", {}).get("type") != "view_image":
            raise FrameError("bad_conditioning", "expected a view_image continuation frame")
        request.ref_shape = _checked_shape(ref_header, ref_payload, max_frame_bytes)
        request.ref_payload = ref_payload
    return request


def _encode(header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = head + b"\n" + payload
    return struct.pack("<I", len(body)) + body


def encode_response(noise: np.ndarray, timestep: int, guidance_scale: float) -> bytes:
    noise = np.ascontiguousarray(noise, dtype="<f4")
    header = {
        "version": PROTOCOL_VERSION,
        "kind": KIND_RESPONSE,
        "tensor_shape": [int(s) for s in noise.shape],
        "dtype": "f32",
        "timestep": int(timestep),
        "guidance_scale": float(guidance_scale),
        "conditioning": {"type": "unconditional"},
    }
    return _encode(header, noise.tobytes())


def encode_error(code: str, message: str) -> bytes:
    header = {
        "version": PROTOCOL_VERSION,
        "kind": KIND_ERROR,
        "tensor_shape": [],
        "dtype": "f32",
        "timestep": 0,
        "guidance_scale": 0.0,
        "conditioning": {"type": "unconditional"},
        "code": code,
        "message": message,
    }
    return _encode(header, b"")
