import io
import socket
import socketserver
import threading

import numpy as np
import pytest

from freqsplat import wire
from freqsplat.errors import (
    InvalidParameterError,
    InvalidTimestepError,
    MissingFixtureError,
    ProtocolError,
    ProtocolVersionError,
    ScheduleError,
    ShapeMismatchError,
)
from freqsplat.priors import (
    NoiseSchedule,
    ScoreRequest,
    TextEmbedding,
    Unconditional,
    ViewCondition,
    add_noise,
    cfg_combine,
    ddim_invert_to_clean,
    ddim_step,
    fixture_provider,
    record_fixture,
    remote_provider,
    synthetic_gaussian_provider,
)


@pytest.fixture
def sched():
    return NoiseSchedule.linear_beta()


class TestSchedule:
    def test_defaults(self, sched):
        assert sched.num_steps == 1000
        assert sched.alpha_bar[0] >= 0.999
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar <= 1))

    def test_omega_modes(self, sched):
        assert sched.omega(500) == pytest.approx(1 - sched.alpha_bar[500])
        flat = NoiseSchedule.linear_beta(weight_mode="constant")
        assert flat.omega(500) == 1.0

    def test_rejects_increasing(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(np.array([0.9995, 0.9996, 0.9]))

    def test_rejects_weak_start(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(np.array([0.99, 0.5]))


class TestAddNoise:
    def test_near_clean_endpoint(self, sched, rng):
        z = rng.normal(size=(3, 4, 4))
        eps = rng.normal(size=(3, 4, 4))
        sched_near_one = NoiseSchedule(np.array([1.0, 0.5]))
        assert np.array_equal(add_noise(z, eps, 0, sched_near_one), z)

    def test_pure_noise_limit(self, rng):
        z = rng.normal(size=(2, 2, 1))
        eps = rng.normal(size=(2, 2, 1))
        tiny = NoiseSchedule(np.array([0.9995, 1e-12]))
        out = add_noise(z, eps, 1, tiny)
        assert np.max(np.abs(out - eps)) < 1e-5

    def test_forced_values(self):
        sched = NoiseSchedule(np.array([0.9999, 0.64]))
        out = add_noise(np.ones((1, 2, 2)), np.zeros((1, 2, 2)), 1, sched)
        assert np.allclose(out, 0.8)

    def test_timestep_range(self, sched, rng):
        z = rng.normal(size=(1, 2, 2))
        with pytest.raises(InvalidTimestepError):
            add_noise(z, z, 1000, sched)
        with pytest.raises(InvalidTimestepError):
            add_noise(z, z, -1, sched)


class TestDdim:
    def test_perfect_inversion(self, sched, rng):
        z = rng.normal(size=(3, 4, 4))
        eps = rng.normal(size=(3, 4, 4))
        z_t = add_noise(z, eps, 700, sched)
        assert np.max(np.abs(ddim_invert_to_clean(z_t, eps, 700, sched) - z)) < 1e-9

    def test_identity_step(self, sched, rng):
        z_t = rng.normal(size=(1, 2, 2))
        eps = rng.normal(size=(1, 2, 2))
        assert np.array_equal(ddim_step(z_t, eps, 400, 400, sched), z_t)

    def test_closed_form_oracle(self, sched, rng):
        z_t = rng.normal(size=(3, 4, 4))
        eps = rng.normal(size=(3, 4, 4))
        t, t_prev = 800, 123
        ab_t, ab_p = sched.alpha_bar[t], sched.alpha_bar[t_prev]
        z0 = (z_t - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
        want = np.sqrt(ab_p) * z0 + np.sqrt(1 - ab_p) * eps
        assert np.max(np.abs(ddim_step(z_t, eps, t, t_prev, sched) - want)) < 1e-9

    def test_add_noise_then_invert_is_identity(self, sched, rng):
        z = rng.normal(size=(3, 8, 8))
        eps = rng.normal(size=(3, 8, 8))
        for t in (1, 250, 999):
            z_t = add_noise(z, eps, t, sched)
            assert np.max(np.abs(ddim_invert_to_clean(z_t, eps, t, sched) - z)) < 1e-9

    def test_rejects_backward_step(self, sched, rng):
        z = rng.normal(size=(1, 2, 2))
        with pytest.raises(InvalidTimestepError):
            ddim_step(z, z, 100, 200, sched)


class TestCfg:
    def test_scale_one(self, rng):
        a, b = rng.normal(size=(2, 3, 3, 3))
        assert np.array_equal(cfg_combine(a, b, 1.0), b)

    def test_scale_zero(self, rng):
        a, b = rng.normal(size=(2, 3, 3, 3))
        assert np.array_equal(cfg_combine(a, b, 0.0), a)

    def test_strong_guidance_scale(self):
        out = cfg_combine(np.zeros((2, 2)), np.ones((2, 2)), 7.5)
        assert np.all(out == 7.5)

    def test_affine_in_scale(self, rng):
        a, b = rng.normal(size=(2, 4, 4))
        s1, s2 = 2.5, 1.25
        lhs = cfg_combine(a, b, s1 + s2) - cfg_combine(a, b, s1)
        assert np.max(np.abs(lhs - s2 * (b - a))) < 1e-12


class TestSyntheticProvider:
    def test_fixed_point(self, sched, rng):
        target = rng.normal(size=(3, 4, 4))
        prov = synthetic_gaussian_provider(target, sched)
        eps = rng.normal(size=(3, 4, 4))
        for t in (10, 500, 990):
            z_t = add_noise(target, eps, t, sched)
            pred = prov.predict(ScoreRequest(latent=z_t, timestep=t))
            assert np.max(np.abs(pred - eps)) < 1e-9

    def test_residual_closed_form(self, sched, rng):
        target = rng.normal(size=(3, 4, 4))
        delta = 0.1 * rng.normal(size=(3, 4, 4))
        prov = synthetic_gaussian_provider(target, sched)
        eps = rng.normal(size=(3, 4, 4))
        t = 400
        z_t = add_noise(target + delta, eps, t, sched)
        pred = prov.predict(ScoreRequest(latent=z_t, timestep=t))
        ab = sched.alpha_bar[t]
        want = -np.sqrt(ab) * delta / np.sqrt(1 - ab)
        assert np.max(np.abs((eps - pred) - want)) < 1e-9

    def test_descends_to_target(self, sched, rng):
        target = rng.normal(size=(1, 2, 2))
        prov = synthetic_gaussian_provider(target, sched)
        z = np.zeros((1, 2, 2))
        lr = 0.1
        for step in range(500):
            t = int(rng.integers(20, 800))
            eps = rng.normal(size=z.shape)
            z_t = add_noise(z, eps, t, sched)
            pred = prov.predict(ScoreRequest(latent=z_t, timestep=t))
            z = z - lr * (pred - eps)
            if np.max(np.abs(z - target)) < 1e-3:
                break
        assert np.max(np.abs(z - target)) < 1e-3

    def test_alpha_bar_one_guard(self, rng):
        sched = NoiseSchedule(np.array([1.0, 0.5]))
        target = rng.normal(size=(1, 2, 2))
        prov = synthetic_gaussian_provider(target, sched)
        out = prov.predict(ScoreRequest(latent=target, timestep=0))
        assert np.all(out == 0.0)
        assert prov.last_undefined

    def test_residual_norm_decreases_along_descent(self, sched, rng):
        target = rng.normal(size=(1, 2, 2))
        prov = synthetic_gaussian_provider(target, sched)
        t, eps = 300, rng.normal(size=(1, 2, 2))
        z = np.zeros((1, 2, 2))
        norms = []
        for _ in range(50):
            z_t = add_noise(z, eps, t, sched)
            pred = prov.predict(ScoreRequest(latent=z_t, timestep=t))
            norms.append(float(np.linalg.norm(pred - eps)))
            z = z - 0.1 * (pred - eps)
        assert all(b < a + 1e-12 for a, b in zip(norms, norms[1:]))


class TestConditioning:
    def test_view_condition_requires_rotation(self, rng):
        with pytest.raises(InvalidParameterError):
            ViewCondition(rng.uniform(size=(4, 4, 3)), np.ones((3, 3)), np.zeros(3))

    def test_text_embedding_hashable(self):
        emb = TextEmbedding((0.1, 0.2))
        assert emb.embedding == (0.1, 0.2)


class TestWire:
    def _request(self, rng, cond=None):
        return ScoreRequest(
            latent=rng.normal(size=(3, 6, 6)).astype(np.float32).astype(np.float64),
            timestep=123,
            conditioning=cond or Unconditional(),
            guidance_scale=5.0,
        )

    def test_roundtrip_unconditional(self, rng):
        req = self._request(rng)
        back = wire.read_request(io.BytesIO(wire.encode_request(req)))
        assert np.array_equal(back.latent, req.latent)
        assert back.timestep == 123 and back.guidance_scale == 5.0
        assert isinstance(back.conditioning, Unconditional)

    def test_roundtrip_view(self, rng):
        cond = ViewCondition(
            rng.uniform(size=(6, 6, 3)).astype(np.float32).astype(np.float64),
            np.eye(3), [0.1, -0.2, 0.3],
        )
        req = self._request(rng, cond)
        back = wire.read_request(io.BytesIO(wire.encode_request(req)))
        assert isinstance(back.conditioning, ViewCondition)
        assert np.array_equal(back.conditioning.ref_image, cond.ref_image)
        assert np.array_equal(back.conditioning.rotation, cond.rotation)

    def test_response_roundtrip(self, rng):
        noise = rng.normal(size=(3, 6, 6)).astype(np.float32).astype(np.float64)
        out = wire.read_response(io.BytesIO(wire.encode_response(noise, 7, 2.0)), (3, 6, 6))
        assert np.array_equal(out, noise)

    def test_digest_matches_after_roundtrip(self, rng):
        req = self._request(rng, ViewCondition(
            rng.uniform(size=(6, 6, 3)), np.eye(3), np.zeros(3)))
        back = wire.read_request(io.BytesIO(wire.encode_request(req)))
        assert wire.request_digest(req) == wire.request_digest(back)

    def test_version_mismatch(self, rng):
        frame = bytearray(wire.encode_request(self._request(rng)))
        payload = bytes(frame[4:]).replace(b'"version":1', b'"version":9', 1)
        bad = frame[:4] + payload
        with pytest.raises(ProtocolVersionError):
            wire.read_frame(io.BytesIO(bytes(bad)))

    def test_truncated_frame(self, rng):
        frame = wire.encode_request(self._request(rng))
        with pytest.raises(ProtocolError):
            wire.read_frame(io.BytesIO(frame[: len(frame) // 2]))

    def test_payload_length_mismatch(self):
        header = wire.make_header(wire.KIND_RESPONSE, [3, 2, 2])
        bad = wire.encode_frame(header, b"\x00" * 7)
        with pytest.raises(ProtocolError):
            wire.read_frame(io.BytesIO(bad))

    def test_error_frame(self):
        frame = wire.encode_error("bad_frame", "nope")
        header, payload = wire.read_frame(io.BytesIO(frame))
        assert header["kind"] == "error" and header["code"] == "bad_frame"
        assert payload == b""


class TestFixtureProvider:
    def test_record_and_replay_bit_exact(self, sched, rng, tmp_path):
        target = rng.normal(size=(3, 4, 4))
        prov = synthetic_gaussian_provider(target, sched)
        requests = [
            ScoreRequest(latent=add_noise(target, rng.normal(size=(3, 4, 4)), t, sched),
                         timestep=t)
            for t in (50, 300, 900)
        ]
        path = tmp_path / "fixtures.npz"
        record_fixture(prov, requests, path)
        replay = fixture_provider(path)
        for req in requests:
            got = replay.predict(req)
            want = np.asarray(prov.predict(req), dtype=np.float32).astype(np.float64)
            assert got.tobytes() == want.tobytes()

    def test_missing_fixture(self, sched, rng, tmp_path):
        target = rng.normal(size=(1, 2, 2))
        prov = synthetic_gaussian_provider(target, sched)
        path = tmp_path / "f.npz"
        record_fixture(prov, [ScoreRequest(latent=target, timestep=3)], path)
        with pytest.raises(MissingFixtureError):
            fixture_provider(path).predict(ScoreRequest(latent=target, timestep=4))


class _EchoHandler(socketserver.StreamRequestHandler):
    def handle(self):
        try:
            while True:
                request = wire.read_request(self.rfile)
                self.wfile.write(wire.encode_response(
                    np.zeros_like(request.latent), request.timestep,
                    request.guidance_scale))
                self.wfile.flush()
        except (ProtocolError, ConnectionError, OSError):
            return


@pytest.fixture
def echo_server():
    server = socketserver.TCPServer(("127.0.0.1", 0), _EchoHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


class TestRemoteProvider:
    def test_echo_roundtrip(self, echo_server, rng):
        with remote_provider(echo_server, timeout=5.0) as prov:
            req = ScoreRequest(latent=rng.normal(size=(3, 4, 4)), timestep=9)
            out = prov.predict(req)
            assert out.shape == (3, 4, 4)
            assert np.all(out == 0.0)

    def test_malformed_frame_raises_protocol_error(self):
        server = socket.socket()
        server.bind(("127.0.0.1", 0))
        server.listen(1)
        endpoint = f"127.0.0.1:{server.getsockname()[1]}"

        def bad_peer():
            conn, _ = server.accept()
            conn.recv(1 << 16)
            conn.sendall(b"\x05\x00\x00\x00hello")  # no header terminator
            conn.close()

        thread = threading.Thread(target=bad_peer, daemon=True)
        thread.start()
        with remote_provider(endpoint, timeout=5.0) as prov, \
                pytest.raises(ProtocolError):
            prov.predict(ScoreRequest(latent=np.zeros((1, 2, 2)), timestep=1))
        server.close()

    def test_bad_endpoint_spec(self):
        with pytest.raises(InvalidParameterError):
            remote_provider("nonsense")

    def test_shape_mismatch(self, rng):
        server = socket.socket()
        server.bind(("127.0.0.1", 0))
        server.listen(1)
        endpoint = f"127.0.0.1:{server.getsockname()[1]}"

        def wrong_shape_peer():
            conn, _ = server.accept()
            stream = conn.makefile("rwb")
            wire.read_request(stream)
            stream.write(wire.encode_response(np.zeros((1, 1, 1))))
            stream.flush()
            conn.close()

        threading.Thread(target=wrong_shape_peer, daemon=True).start()
        with remote_provider(endpoint, timeout=5.0) as prov, \
                pytest.raises(ShapeMismatchError):
            prov.predict(ScoreRequest(latent=np.zeros((3, 2, 2)), timestep=1))
        server.close()
