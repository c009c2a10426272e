import socketserver
import sys
import threading
import time
from pathlib import Path

import pytest
from hypothesis import settings

from crowdkce.predictors import handle_request

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
PARAMS = ROOT / "artifacts" / "valuenet.json"


def stdio_command(body: str) -> list[str]:
    return [sys.executable, "-u", "-c", body]


@pytest.fixture
def echo_command():
    """Subprocess predictor that answers with constant-velocity predictions."""
    return stdio_command("from crowdkce.predictors import serve_stdio; serve_stdio()")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode().strip()
            if not line:
                continue
            if self.server.delay:
                time.sleep(self.server.delay)
            reply = self.server.reply(line) if self.server.reply else handle_request(line)
            try:
                self.wfile.write((reply + "\n").encode())
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


@pytest.fixture
def tcp_server():
    """Factory for a local line-JSON predictor server; yields ``tcp://`` endpoints."""
    servers = []

    def start(delay=0.0, reply=None):
        srv = _Server(("127.0.0.1", 0), _Handler)
        srv.delay, srv.reply = delay, reply
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        servers.append(srv)
        return f"tcp://127.0.0.1:{srv.server_address[1]}"

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
