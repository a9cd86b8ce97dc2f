"""Shared fixtures: canonical replies and a scriptable local HTTP stub."""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

OPTIONS4 = ("red car", "blue car", "green car", "no car")


def summary_block(p="frames 0", o="a road", h="car likely red", u="colour in shade",
                  r="look at the middle") -> str:
    return f"<summary>\nP: {p}\nO: {o}\nH: {h}\nU: {u}\nR: {r}\n</summary>\n"


def select_text(*indices: int, **fields: str) -> str:
    return summary_block(**fields) + "<frames>" + ",".join(map(str, indices)) + "</frames>"


def answer_text(label: str, **fields: str) -> str:
    return summary_block(**fields) + f"<answer>{label}</answer>"


def chat_reply(content: str, logprobs: dict[str, float] | None = None) -> dict[str, Any]:
    choice: dict[str, Any] = {"index": 0, "message": {"role": "assistant", "content": content}}
    if logprobs is not None:
        top = [{"token": k, "logprob": v} for k, v in logprobs.items()]
        choice["logprobs"] = {"content": [{"token": top[0]["token"], "logprob": top[0]["logprob"],
                                           "top_logprobs": top}]}
    return {"choices": [choice]}


@dataclass
class Step:
    status: int = 200
    body: Any = None          # dict -> JSON, str/bytes -> raw
    headers: dict[str, str] = field(default_factory=dict)
    delay: float = 0.0


class StubServer:
    """Serves scripted responses in order (the last one repeats) and records requests."""

    def __init__(self, steps: list[Step]):
        self.steps = steps
        self.requests: list[dict[str, Any]] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                with stub._lock:
                    idx = len(stub.requests)
                    stub.requests.append({"headers": dict(self.headers), "body": json.loads(raw),
                                          "time": time.monotonic()})
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                    step = stub.steps[min(idx, len(stub.steps) - 1)]
                try:
                    if step.delay:
                        time.sleep(step.delay)
                    body = step.body
                    if isinstance(body, (dict, list)):
                        data = json.dumps(body).encode()
                    elif isinstance(body, str):
                        data = body.encode()
                    else:
                        data = body or b""
                    self.send_response(step.status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    for k, v in step.headers.items():
                        self.send_header(k, v)
                    self.end_headers()
                    self.wfile.write(data)
                except (BrokenPipeError, ConnectionResetError):
                    pass
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def __enter__(self) -> "StubServer":
        self.thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()


def free_port_url() -> str:
    """A URL on a port nobody listens on."""
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return f"http://127.0.0.1:{port}/v1/chat/completions"


# -- synthetic fixtures shared by bench and acceptance tests ---------------------------

# Four 12-frame clips at 1 fps. Initial frames are 0, 5, 11 (T=4, cap=3), so the
# oracle's trace is:
#   {5}        answers in round 1                      tau 1, frames 3
#   {2,7}      asks 2,7, answers in round 2            tau 2, frames 5
#   {1,2,3,4}  asks 1,2,3 then 4, answers in round 3   tau 3, frames 7
#   {0,11}     answers in round 1                      tau 1, frames 3
HAND_TRACE_EVIDENCE = ((5,), (2, 7), (1, 2, 3, 4), (0, 11))
HAND_TRACE = {"tau": (1, 2, 3, 1), "frames": (3, 5, 7, 3)}


def hand_trace_tasks():
    from sparsevid.synth import build_task
    return [build_task(0, 12, ev, 4, fps=1.0) for ev in HAND_TRACE_EVIDENCE]


def sweep_tasks():
    """Ten 64-frame clips per clue count; more clues need more rounds."""
    from sparsevid.synth import generate_task
    return [generate_task(s, 64, k, 4) for k in (4, 6, 8, 10, 12, 16) for s in range(10)]


def ablation_tasks():
    """Clips whose clues cannot all be gathered in one round, so memory matters."""
    from sparsevid.synth import generate_task
    return [generate_task(s, 60, k, 4) for k in (2, 4, 6, 8) for s in range(12)]


def items_for(tasks):
    from sparsevid.controller import QAItem
    from sparsevid.synth import SyntheticVideo
    return [QAItem(t.id, SyntheticVideo(t), t.question, t.options, t.correct, f"k={t.k}")
            for t in tasks]
