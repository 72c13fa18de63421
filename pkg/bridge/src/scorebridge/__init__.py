"""Score bridge: serves diffusion noise predictions over a byte protocol."""

__version__ = "0.1.0"

from .backends import EchoBackend, FixtureBackend, make_backend
from .server import BridgeConfig, BridgeServer, serve

__all__ = [
    "BridgeConfig",
    "BridgeServer",
    "EchoBackend",
    "FixtureBackend",
    "make_backend",
    "serve",
]
