"""Line-delimited JSON metrics stream."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import List, Optional

from .errors import ContractError, NumericError

LOSS_FIELDS = ("kd", "intra", "inter", "random", "total")


class MetricsWriter:
    """Append-only JSONL writer; one record per line, flushed immediately.

    Records must carry a strictly increasing integer ``step`` and only finite
    numbers.
    """

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_step: Optional[int] = None
        if append and self.path.exists():
            records = load_metrics(self.path)
            if records:
                self._last_step = records[-1]["step"]
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict):
        step = record.get("step")
        if not isinstance(step, int):
            raise ContractError(f"metrics record without integer step: {record}")
        if self._last_step is not None and step <= self._last_step:
            raise ContractError(f"metrics steps must increase ({self._last_step} -> {step})")
        for key, value in record.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise NumericError(f"refusing to log non-finite {key}={value} at step {step}")
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        self._last_step = step

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_metrics(path) -> List[dict]:
    """Read a metrics stream, raising ``ContractError`` on a truncated or corrupt file."""
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        return []
    if not text.endswith("\n"):
        raise ContractError(f"{path}: truncated metrics file (last line incomplete)")
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}:{lineno}: corrupt metrics record") from exc
    steps = [r["step"] for r in records]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ContractError(f"{path}: steps not strictly increasing")
    return records
