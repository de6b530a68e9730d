#!/usr/bin/env python3
"""In-interpreter harness that loads one candidate program and executes test
cases on request, speaking line-delimited JSON over stdio.

Requests (one JSON object per line on stdin):

    {"cmd": "load", "source": "<python source>"}
    {"cmd": "run", "kind": "stdio" | "functional", "input": ...,
     "entry": "<function name>", "timeout_ms": <int>}
    {"cmd": "exit"}

Replies (one JSON object per line on stdout):

    {"ok": true}                          load / exit
    {"ok": true, "stdout": "..."}         stdio run
    {"ok": true, "result": <json>}        functional run
    {"ok": false, "error_type": "exception" | "timeout" | "load_error"
                              | "protocol", "message": "..."}

Execution model: one process serves one candidate. `load` compiles the
source and executes it once in a persistent namespace (with __name__ set to
"__candidate__" so main-guard blocks stay dormant, and an empty stdin);
functional runs call the entry point in that namespace, so module-level
state persists across tests by design. A program that reads stdin at module
level (a plain stdio script) raises EOFError during that eager execution;
this is tolerated and each stdio run re-executes the compiled source in a
fresh namespace with the test input as stdin and __name__ == "__main__".

A watchdog thread enforces timeout_ms per run: in-interpreter preemption is
unreliable, so on expiry the shim emits a timeout reply and exits the whole
process; the caller respawns it and resumes with the next test. Every run
request gets exactly one reply line; a one-shot gate resolves the race
between a verdict landing at the deadline and the watchdog firing.

Candidate stdout is captured (returned for stdio runs, discarded for
functional runs) and candidate stderr passes through to the process stderr,
so the protocol channel stays clean either way.
"""

from __future__ import annotations

import io
import json
import os
import sys
import threading
import traceback
from contextlib import redirect_stdout

PROTOCOL_OUT = sys.stdout
REQUEST_IN = sys.stdin

_emit_lock = threading.Lock()


def emit(reply: dict) -> None:
    with _emit_lock:
        PROTOCOL_OUT.write(json.dumps(reply, ensure_ascii=False) + "\n")
        PROTOCOL_OUT.flush()


def error_reply(error_type: str, message: str) -> dict:
    return {"ok": False, "error_type": error_type, "message": message}


def traceback_tail(limit: int = 1500) -> str:
    text = traceback.format_exc()
    return text[-limit:] if len(text) > limit else text


class _ReplyGate:
    """At most one reply per request, no matter who produces it."""

    def __init__(self) -> None:
        self._answered = False

    def send(self, reply: dict) -> bool:
        with _emit_lock:
            if self._answered:
                return False
            self._answered = True
            PROTOCOL_OUT.write(json.dumps(reply, ensure_ascii=False) + "\n")
            PROTOCOL_OUT.flush()
            return True


class ShimSession:
    def __init__(self) -> None:
        self.code = None
        self.namespace: dict | None = None
        self.load_attempted = False
        self.poisoned_message: str | None = None

    # -- load ---------------------------------------------------------------

    def handle_load(self, source: str) -> dict:
        if self.load_attempted:
            return error_reply("protocol", "session already holds a candidate (one load per session)")
        self.load_attempted = True
        try:
            self.code = compile(source, "<candidate>", "exec")
        except SyntaxError:
            self.poisoned_message = traceback_tail()
            return error_reply("load_error", self.poisoned_message)
        namespace = {"__name__": "__candidate__"}
        old_stdin = sys.stdin
        sys.stdin = io.StringIO("")
        try:
            with redirect_stdout(io.StringIO()):
                exec(self.code, namespace)
            self.namespace = namespace
        except EOFError:
            # The candidate reads stdin at module level: a plain stdio script.
            # Defer execution to each run request.
            self.namespace = None
        except SystemExit:
            self.namespace = namespace
        except BaseException:
            self.poisoned_message = traceback_tail()
            return error_reply("load_error", self.poisoned_message)
        finally:
            sys.stdin = old_stdin
        return {"ok": True}

    # -- run ----------------------------------------------------------------

    def handle_run(self, request: dict, gate: _ReplyGate) -> None:
        if self.poisoned_message is not None:
            gate.send(error_reply("load_error", self.poisoned_message))
            return
        if not self.load_attempted or self.code is None:
            gate.send(error_reply("protocol", "no candidate loaded"))
            return
        kind = request.get("kind")
        if kind == "stdio":
            work = lambda: self._run_stdio(request)
        elif kind == "functional":
            work = lambda: self._run_functional(request)
        else:
            gate.send(error_reply("protocol", f"unknown run kind {kind!r}"))
            return

        timeout_ms = int(request.get("timeout_ms", 2000))
        finished = threading.Event()

        def watchdog() -> None:
            if finished.wait(timeout_ms / 1000.0):
                return
            if gate.send(error_reply("timeout", f"no verdict within {timeout_ms} ms")):
                # The candidate is still running on the main thread and cannot
                # be preempted reliably; end the process, the caller respawns.
                os._exit(3)

        threading.Thread(target=watchdog, daemon=True).start()
        try:
            reply = work()
        finally:
            finished.set()
        gate.send(reply)

    def _run_stdio(self, request: dict) -> dict:
        namespace = {"__name__": "__main__"}
        captured = io.StringIO()
        old_stdin = sys.stdin
        sys.stdin = io.StringIO(str(request.get("input", "")))
        try:
            with redirect_stdout(captured):
                exec(self.code, namespace)
        except SystemExit:
            pass
        except BaseException:
            return error_reply("exception", traceback_tail())
        finally:
            sys.stdin = old_stdin
        return {"ok": True, "stdout": captured.getvalue()}

    def _run_functional(self, request: dict) -> dict:
        namespace = self.namespace
        if namespace is None:
            # Load was deferred (module-level stdin read); execute fresh.
            namespace = {"__name__": "__candidate__"}
            old_stdin = sys.stdin
            sys.stdin = io.StringIO("")
            try:
                with redirect_stdout(io.StringIO()):
                    exec(self.code, namespace)
            except BaseException:
                return error_reply("exception", traceback_tail())
            finally:
                sys.stdin = old_stdin

        entry = request.get("entry") or "solve"
        target = namespace.get(entry)
        if not callable(target):
            return error_reply("exception", f"entry point {entry!r} is not a callable in the candidate")
        args = request.get("input")
        if not isinstance(args, list):
            args = [args]
        try:
            # Candidate prints must not leak into the protocol channel.
            with redirect_stdout(io.StringIO()):
                result = target(*args)
        except BaseException:
            return error_reply("exception", traceback_tail())
        try:
            json.dumps(result)
        except (TypeError, ValueError):
            return error_reply("exception", f"return value of {entry} is not JSON-serializable: {result!r}")
        return {"ok": True, "result": result}


def main() -> int:
    session = ShimSession()
    for line in REQUEST_IN:
        if not line.strip():
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            emit(error_reply("protocol", f"request is not valid JSON: {exc}"))
            continue
        cmd = request.get("cmd") if isinstance(request, dict) else None
        if cmd == "load":
            emit(session.handle_load(str(request.get("source", ""))))
        elif cmd == "run":
            session.handle_run(request, _ReplyGate())
        elif cmd == "exit":
            emit({"ok": True})
            return 0
        else:
            emit(error_reply("protocol", f"unknown command {cmd!r}"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
