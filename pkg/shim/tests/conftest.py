from __future__ import annotations

import json
import subprocess
import sys
import threading
from pathlib import Path

import pytest

SHIM_PATH = Path(__file__).resolve().parents[1] / "sandbox_shim.py"

ROTATED_SEARCH_BUGGY = """\
def search(nums: list[int], target: int) -> bool:
    left, right = 0, len(nums) - 1

    while left <= right:
        mid = (left + right) // 2

        if nums[mid] == target:
            return True

        if nums[left] <= nums[mid]:  # assume left half is sorted
            if nums[left] <= target < nums[mid]:
                right = mid - 1
            else:
                left = mid + 1
        else:  # assume right half is sorted
            if nums[mid] < target <= nums[right]:
                left = mid + 1
            else:
                right = mid - 1

    return False
"""

ROTATED_SEARCH_FIXED = """\
def search(nums: list[int], target: int) -> bool:
    left, right = 0, len(nums) - 1

    while left <= right:
        mid = (left + right) // 2

        if nums[mid] == target:
            return True

        if nums[left] == nums[mid] == nums[right]:
            left += 1
            right -= 1
            continue

        if nums[left] <= nums[mid]:
            if nums[left] <= target < nums[mid]:
                right = mid - 1
            else:
                left = mid + 1
        else:
            if nums[mid] < target <= nums[right]:
                left = mid + 1
            else:
                right = mid - 1

    return False
"""

# path-covering suite: (args, expected) with the two duplicate-ambiguity
# cases last
ROTATED_SEARCH_TESTS = [
    ([[4, 5, 6, 7, 0, 1, 2], 0], True),
    ([[4, 5, 6, 7, 0, 1, 2], 3], False),
    ([[6, 7, 0, 1, 2, 4, 5], 7], True),
    ([[6, 7, 0, 1, 2, 4, 5], 4], True),
    ([[1, 1, 1, 3, 1], 3], True),
    ([[1, 0, 1, 1, 1], 0], True),
]


class ShimProc:
    """One shim process plus helpers to hold a line-JSON conversation."""

    def __init__(self):
        self.proc = subprocess.Popen(
            [sys.executable, str(SHIM_PATH)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def send(self, obj: dict) -> None:
        assert self.proc.stdin is not None
        self.proc.stdin.write(json.dumps(obj) + "\n")
        self.proc.stdin.flush()

    def recv_line(self, timeout: float = 5.0) -> str | None:
        box: dict = {}

        def read() -> None:
            assert self.proc.stdout is not None
            box["line"] = self.proc.stdout.readline()

        thread = threading.Thread(target=read, daemon=True)
        thread.start()
        thread.join(timeout)
        return box.get("line") or None

    def recv(self, timeout: float = 5.0) -> dict:
        line = self.recv_line(timeout)
        assert line, "no reply from shim"
        return json.loads(line)

    def ask(self, obj: dict, timeout: float = 5.0) -> dict:
        self.send(obj)
        return self.recv(timeout)

    def load(self, source: str, timeout: float = 5.0) -> dict:
        return self.ask({"cmd": "load", "source": source}, timeout)

    def run(self, kind: str, input_value, entry: str = "solve", timeout_ms: int = 2000, timeout: float = 8.0) -> dict:
        return self.ask(
            {"cmd": "run", "kind": kind, "input": input_value, "entry": entry, "timeout_ms": timeout_ms},
            timeout,
        )

    def close(self) -> None:
        try:
            if self.proc.poll() is None:
                self.send({"cmd": "exit"})
                self.proc.wait(timeout=3)
        except (OSError, subprocess.TimeoutExpired, ValueError):
            pass
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=3)


@pytest.fixture
def shim():
    proc = ShimProc()
    yield proc
    proc.close()
