"""Wire protocol and process roles for distributed runs."""

from fedpoison.transport.client import client_loop
from fedpoison.transport.server import DEFAULT_PORT, Server, serve

__all__ = ["DEFAULT_PORT", "Server", "client_loop", "serve"]
