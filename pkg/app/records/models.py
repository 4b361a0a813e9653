from dataclasses import dataclass, field
from typing import Dict, List, Optional

BYTES_PER_PARAM = 8
HEADER_BYTES = 64


@dataclass
class RoundRecord:
    """
    One global round of the mapping loop

    ``grad_norm_sq`` is the squared full-batch held-out gradient norm at the
    model broadcast in this round.
    """

    round: int
    area_losses: List[float]
    global_loss: float
    grad_norm_sq: float
    up_bytes: int
    down_bytes: int
    area_up_bytes: List[int] = field(default_factory=list)
    area_down_bytes: List[int] = field(default_factory=list)
    wall_ms: float = 0.0


@dataclass
class CostLedger:
    """
    Cumulative transport and compute accounting

    Payload bytes are 8 per parameter (or raw value); each message adds a
    64-byte header counted in ``header_bytes``. Counters only grow.
    """

    mode: str
    upload_bytes: int = 0
    download_bytes: int = 0
    header_bytes: int = 0
    messages: int = 0
    local_steps: int = 0
    server_steps: int = 0

    def upload(self, values: int, messages: int = 1) -> None:
        self._message(values, messages, upload=True)

    def download(self, values: int, messages: int = 1) -> None:
        self._message(values, messages, upload=False)

    def _message(self, values: int, messages: int, upload: bool) -> None:
        if values < 0 or messages < 0:
            raise ValueError("ledger counts must be non-negative")
        payload = values * BYTES_PER_PARAM * messages
        if upload:
            self.upload_bytes += payload
        else:
            self.download_bytes += payload
        self.header_bytes += HEADER_BYTES * messages
        self.messages += messages

    def upload_raw_bytes(self, size: int, messages: int = 1) -> None:
        """Ship an already-sized payload (e.g. a raw dataset shard)"""
        if size < 0 or messages < 0:
            raise ValueError("ledger counts must be non-negative")
        self.upload_bytes += size
        self.header_bytes += HEADER_BYTES * messages
        self.messages += messages

    def compute(self, local: int = 0, server: int = 0) -> None:
        if local < 0 or server < 0:
            raise ValueError("ledger counts must be non-negative")
        self.local_steps += local
        self.server_steps += server

    @property
    def payload_bytes(self) -> int:
        return self.upload_bytes + self.download_bytes

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.header_bytes

    def to_row(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "upload_bytes": self.upload_bytes,
            "download_bytes": self.download_bytes,
            "header_bytes": self.header_bytes,
            "payload_bytes": self.payload_bytes,
            "total_bytes": self.total_bytes,
            "messages": self.messages,
            "local_steps": self.local_steps,
            "server_steps": self.server_steps,
        }


@dataclass
class NmseRow:
    """One (fusor, op, mode, seed) evaluation"""

    fusor: str
    op: str
    mode: str
    seed: int
    nmse: float
    per_target: Dict[str, float]
    samples: int
    downstream: Optional[float] = None
