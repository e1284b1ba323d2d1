"""Local chat-completions stub for HTTP backend tests."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class StubServer:
    """Answers ``A<k>`` where k is the number of user turns seen so far.

    ``failures`` is a list of status codes returned (in order) before success.
    """

    def __init__(self, failures=(), answer=None):
        self.failures = list(failures)
        self.answer = answer
        self.requests = []
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append({"path": self.path, "headers": dict(self.headers), "body": body})
                    status = stub.failures.pop(0) if stub.failures else 200
                if status != 200:
                    self.send_response(status)
                    self.end_headers()
                    self.wfile.write(b"injected failure")
                    return
                n_user = sum(1 for m in body["messages"] if m["role"] == "user")
                text = stub.answer(body) if stub.answer else f"A{n_user}"
                payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
