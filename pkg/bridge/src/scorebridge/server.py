"""Single-connection request/response loop over the frame protocol.

One client at a time, strictly alternating request -> response. Protocol
violations are answered with an error frame and the connection is closed
(a corrupt length-prefixed stream cannot be resynchronized); the listener
then accepts the next client. Nothing is ever silently dropped.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass

from . import wire
from .backends import BackendError

DEFAULT_MAX_TENSOR_BYTES = 1 << 26  # 64 MiB


@dataclass
class BridgeConfig:
    backend: str = "echo"
    model_id: str | None = None
    device: str = "cpu"
    endpoint: str = "127.0.0.1:0"
    fixture_path: str | None = None
    max_tensor_bytes: int = DEFAULT_MAX_TENSOR_BYTES


class BridgeServer:
    def __init__(self, config: BridgeConfig, backend):
        self.config = config
        self.backend = backend
        host, _, port = config.endpoint.rpartition(":")
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host or "127.0.0.1", int(port)))
        self._sock.listen(1)
        self._shutdown = False

    @property
    def endpoint(self) -> str:
        host, port = self._sock.getsockname()
        return f"{host}:{port}"

    def close(self) -> None:
        self._shutdown = True
        try:
            self._sock.close()
        except OSError:
            pass

    def _answer(self, stream, request: wire.Request) -> None:
        cond_type = request.conditioning.get("type", "unconditional")
        if cond_type not in self.backend.accepts:
            stream.write(wire.encode_error(
                "wrong_backend",
                f"{type(self.backend).__name__} does not serve {cond_type!r} conditioning"))
            return
        try:
            noise = self.backend.predict(request)
        except BackendError as exc:
            stream.write(wire.encode_error(exc.code, str(exc)))
            return
        if tuple(noise.shape) != request.shape:
            stream.write(wire.encode_error(
                "shape_mismatch",
                f"backend produced {tuple(noise.shape)}, request was {request.shape}"))
            return
        stream.write(wire.encode_response(noise, request.timestep,
                                          request.guidance_scale))

    def _serve_connection(self, conn) -> None:
        stream = conn.makefile("rwb")
        try:
            while True:
                try:
                    request = wire.read_request(stream, self.config.max_tensor_bytes)
                except wire.FrameError as exc:
                    stream.write(wire.encode_error(exc.code, str(exc)))
                    stream.flush()
                    return  # cannot resynchronize a corrupt stream
                except EOFError:
                    # peer vanished mid-frame; answer best-effort, then close
                    stream.write(wire.encode_error("truncated", "stream ended mid-frame"))
                    stream.flush()
                    return
                if request is None:
                    return
                self._answer(stream, request)
                stream.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            return
        finally:
            try:
                stream.close()
                conn.close()
            except OSError:
                pass

    def serve_forever(self) -> None:
        while not self._shutdown:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return  # listener closed
            self._serve_connection(conn)


def serve(config: BridgeConfig):
    """Build the backend and run the accept loop (blocking)."""
    from .backends import make_backend

    backend = make_backend(config.backend, config.model_id, config.device,
                           config.fixture_path)
    server = BridgeServer(config, backend)
    print(f"score-bridge: backend={config.backend} listening on {server.endpoint}",
          flush=True)
    try:
        server.serve_forever()
    finally:
        server.close()
