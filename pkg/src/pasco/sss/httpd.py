"""Stdlib HTTP front-end for the service.

Kept deliberately small: every request funnels into SssService.handle_api,
which does all parsing, authentication, and error mapping.  A threading
server gives one thread per connection, which is plenty at personal scale
and keeps shutdown deterministic for tests that kill and restart a service.
"""

from __future__ import annotations

import argparse
import base64
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .service import SssService


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _dispatch(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        status, headers, out = self.server.service.handle_api(
            self.command, self.path, dict(self.headers), body
        )
        self.send_response(status)
        for name, value in headers.items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    do_GET = do_POST = do_PUT = do_DELETE = _dispatch

    def log_message(self, fmt, *args):
        pass  # request lines carry opaque ids; still, stay silent by default


class SssHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: SssService):
        super().__init__(address, _Handler)
        self.service = service

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self) -> None:
        """Stop serving and release the port so it can be rebound."""
        self.shutdown()
        self.server_close()


def serve_background(service: SssService, host: str = "127.0.0.1", port: int = 0) -> SssHttpServer:
    """Start a server thread; returns once it is accepting connections."""
    server = SssHttpServer((host, port), service)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pasco-sss", description="Run a synchronization service endpoint."
    )
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8440)
    parser.add_argument("--state", help="durable state file (omit for in-memory)")
    args = parser.parse_args(argv)

    service = SssService(store_path=args.state)
    server = SssHttpServer((args.host, args.port), service)
    print(f"listening on {server.url}")
    print(f"public key: {base64.b64encode(service.public_key).decode('ascii')}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
