import threading

import pytest

from scorebridge.server import BridgeConfig, BridgeServer


@pytest.fixture
def serve_backend():
    """Start a bridge around a backend; yields (endpoint getter, cleanup)."""
    servers = []

    def start(backend, **config_kwargs):
        config = BridgeConfig(endpoint="127.0.0.1:0", **config_kwargs)
        server = BridgeServer(config, backend)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return server.endpoint

    yield start
    for server in servers:
        server.close()
