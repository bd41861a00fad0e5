"""
Logger for mvad - JSON-lines run traces plus console progress
"""

import json
import warnings
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Type


class RunLogger:
    def __init__(self, log_dir: str | Path = "logs", echo: bool = True):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.echo = echo

        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
        self.log_file = self.log_dir / f"trace_{timestamp}.jsonl"
        self.current_stage: Optional[str] = None

        self._write_entry({
            "event": "session_start",
            "timestamp": datetime.now().isoformat()
        })

    def start_stage(self, stage: str, details: Optional[Dict[str, Any]] = None):
        self.current_stage = stage
        self._write_entry({
            "event": "stage_start",
            "stage": stage,
            "content": details or {},
            "timestamp": datetime.now().isoformat()
        })
        self.info(f"▶ {stage}")

    def log_step(self, step_type: str, content: Any):
        self._write_entry({
            "event": "step",
            "stage": self.current_stage,
            "step_type": step_type,
            "content": content,
            "timestamp": datetime.now().isoformat()
        })

    def warning(self, message: str, category: Type[Warning] = UserWarning):
        """Record a warning in the trace and raise it through `warnings`."""
        self._write_entry({
            "event": "warning",
            "stage": self.current_stage,
            "category": category.__name__,
            "content": message,
            "timestamp": datetime.now().isoformat()
        })
        warnings.warn(message, category, stacklevel=2)

    def end_stage(self, summary: Any = None):
        self._write_entry({
            "event": "stage_end",
            "stage": self.current_stage,
            "content": summary,
            "timestamp": datetime.now().isoformat()
        })
        self.current_stage = None

    def info(self, message: str):
        if self.echo:
            print(message)

    def _write_entry(self, entry: Dict[str, Any]):
        with open(self.log_file, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, default=str) + "\n")
            f.flush()


class NullLogger(RunLogger):
    """Logger that records nothing; warnings are still raised."""

    def __init__(self):
        self.echo = False
        self.current_stage = None

    def _write_entry(self, entry: Dict[str, Any]):
        pass
