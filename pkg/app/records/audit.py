import json
import logging
import os
import uuid
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from ..errors import DivergenceError, ReportIOError

logger = logging.getLogger(__name__)


class RunAuditLogger:
    """
    JSON-lines journal of one experiment run

    Every significant action (dataset generated, round completed, transform
    finished, report written, divergence) becomes one line in
    ``<out>/logs/audit.log``.
    """

    LOG_DIR = "logs"
    LOG_FILE = "audit.log"

    def __init__(self, out_dir: str, run_id: Optional[str] = None):
        self.out_dir = out_dir
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.path = os.path.join(out_dir, self.LOG_DIR, self.LOG_FILE)

    def ensure_log_dir(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)

    def log_event(self, event_type: str, details: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Append one event

        Returns:
            The entry as written
        """
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "event_type": event_type,
            "run_id": self.run_id,
            "details": details or {},
        }
        try:
            self.ensure_log_dir()
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, default=str) + "\n")
        except OSError as e:
            raise ReportIOError(f"cannot write audit log: {e}", path=self.path) from e
        return entry

    def log_round(self, record) -> Dict[str, Any]:
        return self.log_event("round_completed", {
            "round": record.round,
            "global_loss": record.global_loss,
            "grad_norm_sq": record.grad_norm_sq,
            "up_bytes": record.up_bytes,
            "down_bytes": record.down_bytes,
        })

    def log_divergence(self, error: DivergenceError) -> str:
        """Journal the divergence and write ``divergence.json``; returns its path"""
        report = error.to_dict()
        self.log_event("divergence", report)
        path = os.path.join(self.out_dir, "divergence.json")
        try:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(report, f, indent=2)
        except OSError as e:
            raise ReportIOError(f"cannot write divergence report: {e}", path=path) from e
        logger.error(f"Divergence report written to {path}")
        return path

    def read_events(self, event_type: Optional[str] = None) -> List[Dict[str, Any]]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            events = [json.loads(line) for line in f if line.strip()]
        if event_type is not None:
            events = [e for e in events if e["event_type"] == event_type]
        return events
