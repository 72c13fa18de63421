import socket

import numpy as np
import pytest

from scorebridge.backends import (
    BackendError,
    BackendUnavailable,
    EchoBackend,
    FixtureBackend,
    make_backend,
)
from scorebridge import wire


class _ViewOnlyBackend(EchoBackend):
    accepts = ("view",)


def _recv_frame(sock):
    data = b""
    while len(data) < 4:
        data += sock.recv(4096)
    import struct
    length = struct.unpack("<I", data[:4])[0]
    while len(data) < 4 + length:
        data += sock.recv(4096)
    return data[4:4 + length]


class TestEchoServer:
    def test_roundtrip_with_optimizer_client(self, serve_backend):
        remote_provider = pytest.importorskip("freqsplat.priors").remote_provider
        from freqsplat.priors import ScoreRequest

        endpoint = serve_backend(EchoBackend())
        with remote_provider(endpoint, timeout=5.0) as provider:
            rng = np.random.default_rng(0)
            for t in (5, 100, 900):
                req = ScoreRequest(latent=rng.normal(size=(3, 8, 8)), timestep=t)
                out = provider.predict(req)
                assert out.shape == (3, 8, 8)
                assert np.all(out == 0.0)

    def test_sequential_connections(self, serve_backend):
        remote_provider = pytest.importorskip("freqsplat.priors").remote_provider
        from freqsplat.priors import ScoreRequest

        endpoint = serve_backend(EchoBackend())
        for _ in range(3):
            with remote_provider(endpoint, timeout=5.0) as provider:
                out = provider.predict(ScoreRequest(latent=np.ones((1, 2, 2)), timestep=1))
                assert np.all(out == 0.0)

    def test_malformed_length_prefix_answered_with_error_frame(self, serve_backend):
        endpoint = serve_backend(EchoBackend())
        host, port = endpoint.rsplit(":", 1)
        with socket.create_connection((host, int(port)), timeout=5.0) as sock:
            sock.sendall(b"\x09\x00\x00\x00garbage!!")
            body = _recv_frame(sock)
            import json
            header = json.loads(body.split(b"\n", 1)[0])
            assert header["kind"] == "error"
            assert header["code"] in ("bad_frame", "bad_header")

    def test_wrong_backend_conditioning_routed_to_error(self, serve_backend):
        freqsplat_wire = pytest.importorskip("freqsplat.wire")
        from freqsplat.errors import ProtocolError
        from freqsplat.priors import ScoreRequest, remote_provider

        endpoint = serve_backend(_ViewOnlyBackend())
        with remote_provider(endpoint, timeout=5.0) as provider, \
                pytest.raises(ProtocolError, match="wrong_backend"):
            provider.predict(ScoreRequest(latent=np.zeros((1, 2, 2)), timestep=1))


class TestFixtureBackend:
    def test_missing_fixture_error_frame(self, serve_backend, tmp_path):
        np.savez(tmp_path / "empty.npz")
        pytest.importorskip("freqsplat")
        from freqsplat.errors import ProtocolError
        from freqsplat.priors import ScoreRequest, remote_provider

        endpoint = serve_backend(FixtureBackend(str(tmp_path / "empty.npz")))
        with remote_provider(endpoint, timeout=5.0) as provider, \
                pytest.raises(ProtocolError, match="missing_fixture"):
            provider.predict(ScoreRequest(latent=np.zeros((1, 2, 2)), timestep=1))


class TestMakeBackend:
    def test_echo(self):
        assert isinstance(make_backend("echo"), EchoBackend)

    def test_fixture_requires_path(self):
        with pytest.raises(BackendError):
            make_backend("fixture")

    def test_unknown(self):
        with pytest.raises(BackendError):
            make_backend("warp-drive")

    def test_real_backends_unavailable_without_deps(self):
        try:
            import diffusers  # noqa: F401
            pytest.skip("diffusers installed; real backend would initialize")
        except ImportError:
            pass
        with pytest.raises(BackendUnavailable):
            make_backend("sd")
        with pytest.raises(BackendUnavailable):
            make_backend("zero123")
