"""Worker pools. The orchestrator only sees two channels: ``submit`` (work out) and ``get`` (results in)."""

from __future__ import annotations

import queue
import subprocess
import sys
import threading

from .evaluators import WorkerDeath
from .protocol import FAILURE, RESULT, SHUTDOWN, WORK, handle_work, message, read_message, write_message


class ThreadPool:
    """In-process workers; an injected fault kills the thread and a replacement is started."""

    def __init__(self, size: int):
        self.size = size
        self.work: queue.Queue = queue.Queue()
        self.results: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._closed = False
        self.deaths = 0
        for _ in range(size):
            self._spawn()

    def _spawn(self) -> None:
        t = threading.Thread(target=self._loop, daemon=True)
        self._threads.append(t)
        t.start()

    def _loop(self) -> None:
        while True:
            msg = self.work.get()
            if msg["type"] == SHUTDOWN:
                return
            payload = msg["payload"]
            ident = {"id": payload["id"], "attempt": payload.get("attempt", 0)}
            try:
                result = handle_work(payload)
            except WorkerDeath as exc:
                self.deaths += 1
                self.results.put(message(FAILURE, {**ident, "error": str(exc)}))
                if not self._closed:
                    self._spawn()
                return
            except Exception as exc:  # a crashing evaluation must not take the run down
                self.results.put(message(FAILURE, {**ident, "error": f"{type(exc).__name__}: {exc}"}))
            else:
                self.results.put(message(RESULT, result))

    def submit(self, payload: dict) -> None:
        self.work.put(message(WORK, payload))

    def get(self) -> dict:
        return self.results.get()

    def close(self) -> None:
        self._closed = True
        for _ in range(len(self._threads)):
            self.work.put(message(SHUTDOWN))
        for t in list(self._threads):
            t.join(timeout=5)


class ProcessPool:
    """Worker processes speaking the framed protocol on stdin/stdout.

    One feeder thread per slot hands a single item to its process at a
    time; a process that exits mid-item is reported as a failure and
    replaced.
    """

    def __init__(self, size: int):
        self.size = size
        self.work: queue.Queue = queue.Queue()
        self.results: queue.Queue = queue.Queue()
        self.deaths = 0
        self._threads = [threading.Thread(target=self._slot, daemon=True) for _ in range(size)]
        for t in self._threads:
            t.start()

    @staticmethod
    def _start() -> subprocess.Popen:
        return subprocess.Popen(
            [sys.executable, "-m", "nasnet_search.searchd.protocol"],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )

    def _slot(self) -> None:
        proc = self._start()
        try:
            while True:
                msg = self.work.get()
                if msg["type"] == SHUTDOWN:
                    write_message(proc.stdin, msg)
                    proc.wait(timeout=10)
                    return
                payload = msg["payload"]
                try:
                    write_message(proc.stdin, msg)
                    reply = read_message(proc.stdout)
                except (BrokenPipeError, OSError, ValueError):
                    reply = None
                if reply is None:
                    self.deaths += 1
                    proc.wait(timeout=10)
                    self.results.put(message(FAILURE, {"id": payload["id"], "attempt": payload.get("attempt", 0),
                                                       "error": f"worker process exited with {proc.returncode}"}))
                    proc = self._start()
                else:
                    self.results.put(reply)
        finally:
            if proc.poll() is None:
                proc.kill()

    def submit(self, payload: dict) -> None:
        self.work.put(message(WORK, payload))

    def get(self) -> dict:
        return self.results.get()

    def close(self) -> None:
        for _ in self._threads:
            self.work.put(message(SHUTDOWN))
        for t in self._threads:
            t.join(timeout=15)


def make_pool(transport: str, size: int):
    return ProcessPool(size) if transport == "process" else ThreadPool(size)
