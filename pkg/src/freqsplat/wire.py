"""Score wire protocol: length-prefixed frames carrying a JSON header and a
raw float32 tensor.

Frame layout, byte-exact:

    [4-byte little-endian unsigned length][header JSON, UTF-8]\\n[payload]

where length counts everything after the prefix (header + newline + payload)
and the payload is exactly prod(tensor_shape) * 4 bytes of little-endian
float32. Header keys: version (1), kind ("score_request" | "score_response"
| "error"), tensor_shape [C, H, W], dtype ("f32"), timestep, guidance_scale,
conditioning. View conditioning serializes the 3x3 rotation row-major and
the translation inside the header; the reference image follows as a second
frame whose conditioning is {"type": "view_image"}. Error frames add "code"
and "message" keys and carry no payload.

Requests and responses alternate strictly on a byte stream (socket or pipe).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ProtocolError, ProtocolVersionError, ShapeMismatchError

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 1 << 26  # 64 MiB guard before allocation

KIND_REQUEST = "score_request"
KIND_RESPONSE = "score_response"
KIND_ERROR = "error"


def tensor_to_payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def payload_to_tensor(payload: bytes, shape) -> np.ndarray:
    expected = int(np.prod(shape)) * 4 if len(shape) else 0
    if len(payload) != expected:
        raise ProtocolError(f"payload is {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def encode_frame(header: dict, payload: bytes = b"") -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = head + b"\n" + payload
    if len(body) > MAX_FRAME_BYTES:
        raise ProtocolError("frame exceeds maximum size")
    return struct.pack("<I", len(body)) + body


def make_header(kind: str, tensor_shape, timestep: int = 0, guidance_scale: float = 1.0,
                conditioning: dict | None = None, **extra) -> dict:
    header = {
        "version": PROTOCOL_VERSION,
        "kind": kind,
        "tensor_shape": [int(s) for s in tensor_shape],
        "dtype": "f32",
        "timestep": int(timestep),
        "guidance_scale": float(guidance_scale),
        "conditioning": conditioning or {"type": "unconditional"},
    }
    header.update(extra)
    return header


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise ProtocolError("stream closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> tuple[dict, bytes]:
    """Read one frame from a file-like byte stream; validates the header."""
    prefix = stream.read(4)
    if not prefix:
        raise ProtocolError("stream closed before frame")
    if len(prefix) < 4:
        prefix += _read_exact(stream, 4 - len(prefix))
    (length,) = struct.unpack("<I", prefix)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"declared frame length {length} exceeds limit")
    body = _read_exact(stream, length)
    newline = body.find(b"\n")
    if newline < 0:
        raise ProtocolError("frame missing header terminator")
    try:
        header = json.loads(body[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"unparseable frame header: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("frame header is not a JSON object")
    version = header.get("version")
    if version != PROTOCOL_VERSION:
        raise ProtocolVersionError(f"peer speaks version {version!r}, expected {PROTOCOL_VERSION}")
    kind = header.get("kind")
    if kind not in (KIND_REQUEST, KIND_RESPONSE, KIND_ERROR):
        raise ProtocolError(f"unknown frame kind {kind!r}")
    payload = body[newline + 1:]
    if kind != KIND_ERROR:
        shape = header.get("tensor_shape")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ProtocolError("bad tensor_shape in header")
        if header.get("dtype") != "f32":
            raise ProtocolError(f"unsupported dtype {header.get('dtype')!r}")
        expected = int(np.prod(shape)) * 4 if shape else 0
        if len(payload) != expected:
            raise ProtocolError(
                f"tensor payload {len(payload)} bytes does not match shape {shape}"
            )
    return header, payload


def conditioning_to_obj(cond) -> tuple[dict, bytes | None]:
    """Header object plus the optional trailing tensor payload (view image)."""
    from .priors import TextEmbedding, Unconditional, ViewCondition

    if cond is None or isinstance(cond, Unconditional):
        return {"type": "unconditional"}, None
    if isinstance(cond, TextEmbedding):
        return {"type": "text", "embedding": [float(v) for v in cond.embedding]}, None
    if isinstance(cond, ViewCondition):
        obj = {
            "type": "view",
            "rotation": [float(v) for v in np.asarray(cond.rotation).reshape(9)],
            "translation": [float(v) for v in np.asarray(cond.translation).reshape(3)],
        }
        image = np.transpose(np.asarray(cond.ref_image, dtype=np.float64), (2, 0, 1))
        return obj, tensor_to_payload(image)
    raise ProtocolError(f"unsupported conditioning {type(cond).__name__}")


def obj_to_conditioning(obj: dict, ref_payload: bytes | None, ref_shape=None):
    from .priors import TextEmbedding, Unconditional, ViewCondition

    kind = obj.get("type")
    if kind == "unconditional":
        return Unconditional()
    if kind == "text":
        return TextEmbedding(tuple(float(v) for v in obj["embedding"]))
    if kind == "view":
        if ref_payload is None or ref_shape is None:
            raise ProtocolError("view conditioning lacks its reference-image frame")
        image = payload_to_tensor(ref_payload, ref_shape)
        return ViewCondition(
            ref_image=np.transpose(image, (1, 2, 0)),
            rotation=np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(obj["translation"], dtype=np.float64).reshape(3),
        )
    raise ProtocolError(f"unknown conditioning type {kind!r}")


def encode_request(request) -> bytes:
    """Serialize a ScoreRequest to one frame, or two for view conditioning."""
    latent = np.asarray(request.latent)
    cond_obj, ref_payload = conditioning_to_obj(request.conditioning)
    frames = encode_frame(
        make_header(KIND_REQUEST, latent.shape, request.timestep,
                    request.guidance_scale, cond_obj),
        tensor_to_payload(latent),
    )
    if ref_payload is not None:
        ref_shape = (3,) + np.asarray(request.conditioning.ref_image).shape[:2]
        frames += encode_frame(
            make_header(KIND_REQUEST, ref_shape, request.timestep,
                        request.guidance_scale, {"type": "view_image"}),
            ref_payload,
        )
    return frames


def read_request(stream):
    """Read one request (and its view-image continuation frame when present)."""
    from .priors import ScoreRequest

    header, payload = read_frame(stream)
    if header["kind"] == KIND_ERROR:
        raise ProtocolError(f"peer error: {header.get('code')}: {header.get('message')}")
    if header["kind"] != KIND_REQUEST:
        raise ProtocolError(f"expected a request frame, got {header['kind']!r}")
    latent = payload_to_tensor(payload, header["tensor_shape"])
    cond_obj = header.get("conditioning")
    if not isinstance(cond_obj, dict):
        raise ProtocolError("request header lacks conditioning")
    ref_payload = ref_shape = None
    if cond_obj.get("type") == "view":
        ref_header, ref_payload = read_frame(stream)
        if ref_header["kind"] != KIND_REQUEST or \
                ref_header.get("conditioning", {}).get("type") != "view_image":
            raise ProtocolError("view request not followed by its reference-image frame")
        ref_shape = ref_header["tensor_shape"]
    conditioning = obj_to_conditioning(cond_obj, ref_payload, ref_shape)
    return ScoreRequest(
        latent=latent,
        timestep=int(header["timestep"]),
        conditioning=conditioning,
        guidance_scale=float(header["guidance_scale"]),
    )


def encode_response(noise: np.ndarray, timestep: int = 0, guidance_scale: float = 1.0) -> bytes:
    noise = np.asarray(noise)
    return encode_frame(
        make_header(KIND_RESPONSE, noise.shape, timestep, guidance_scale),
        tensor_to_payload(noise),
    )


def encode_error(code: str, message: str) -> bytes:
    header = make_header(KIND_ERROR, [], conditioning={"type": "unconditional"})
    header["code"] = code
    header["message"] = message
    return encode_frame(header, b"")


def read_response(stream, expected_shape) -> np.ndarray:
    header, payload = read_frame(stream)
    if header["kind"] == KIND_ERROR:
        raise ProtocolError(f"peer error: {header.get('code')}: {header.get('message')}")
    if header["kind"] != KIND_RESPONSE:
        raise ProtocolError(f"expected a response frame, got {header['kind']!r}")
    if tuple(header["tensor_shape"]) != tuple(expected_shape):
        raise ShapeMismatchError(
            f"response shape {header['tensor_shape']} != request shape {list(expected_shape)}"
        )
    return payload_to_tensor(payload, header["tensor_shape"])


def request_digest(request) -> str:
    """Canonical content hash shared by fixture archives and the bridge."""
    latent = np.asarray(request.latent)
    cond_obj, ref_payload = conditioning_to_obj(request.conditioning)
    canonical = {
        "conditioning": cond_obj,
        "dtype": "f32",
        "guidance_scale": float(request.guidance_scale),
        "shape": [int(s) for s in latent.shape],
        "timestep": int(request.timestep),
        "version": PROTOCOL_VERSION,
    }
    digest = hashlib.sha256()
    digest.update(json.dumps(canonical, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    digest.update(b"\n")
    digest.update(tensor_to_payload(latent))
    if ref_payload is not None:
        digest.update(b"\n")
        digest.update(ref_payload)
    return digest.hexdigest()
