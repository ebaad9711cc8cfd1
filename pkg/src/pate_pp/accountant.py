"""Renyi-DP ledger for Gaussian aggregation events and conversion to (eps, delta)-DP."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_ORDERS = (1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)

CHECK_SENSITIVITY = 1.0
ANSWER_SENSITIVITY = math.sqrt(2.0)


class LedgerFormatError(ValueError):
    pass


def gaussian_rdp(sensitivity: float, sigma: float, order: float) -> float:
    """RDP of the Gaussian mechanism at one order: order * sens^2 / (2 sigma^2)."""
    if sensitivity <= 0 or sigma <= 0 or order <= 1:
        raise ValueError(
            f"need sensitivity > 0, sigma > 0, order > 1 (got {sensitivity}, {sigma}, {order})"
        )
    return order * sensitivity**2 / (2.0 * sigma**2)


@dataclass(frozen=True)
class Event:
    kind: str
    delta: float  # L2 sensitivity, named as in the JSON layout
    sigma: float


@dataclass(frozen=True)
class DpGuarantee:
    epsilon: float
    delta: float
    order: float


@dataclass
class RdpLedger:
    orders: tuple = DEFAULT_ORDERS
    eps_rdp: np.ndarray = None
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.orders = tuple(float(o) for o in self.orders)
        if not self.orders or any(o <= 1 for o in self.orders):
            raise ValueError("orders must be non-empty and all > 1")
        if list(self.orders) != sorted(set(self.orders)):
            raise ValueError("orders must be strictly ascending")
        if self.eps_rdp is None:
            self.eps_rdp = np.zeros(len(self.orders))
        else:
            self.eps_rdp = np.asarray(self.eps_rdp, dtype=np.float64).copy()
        if self.eps_rdp.shape != (len(self.orders),):
            raise ValueError("eps_rdp must have one entry per order")

    def cost(self, kind: str, sensitivity: float, sigma: float) -> np.ndarray:
        """Per-order RDP increment that recording this event would add."""
        if kind not in ("check", "answer"):
            raise ValueError(f"unknown event kind {kind!r}")
        if sigma == 0:
            # noiseless release: no finite guarantee at any order
            return np.full(len(self.orders), np.inf)
        return np.array([gaussian_rdp(sensitivity, sigma, o) for o in self.orders])

    def record(self, kind: str, sensitivity: float, sigma: float) -> "RdpLedger":
        self.eps_rdp += self.cost(kind, sensitivity, sigma)
        self.events.append(Event(kind, float(sensitivity), float(sigma)))
        return self

    def to_dp(self, delta: float) -> DpGuarantee:
        return to_dp(self, delta)

    def copy(self) -> "RdpLedger":
        return RdpLedger(self.orders, self.eps_rdp, list(self.events))

    def to_json(self) -> dict:
        return {
            "orders": list(self.orders),
            "eps_rdp": self.eps_rdp.tolist(),
            "events": [{"kind": e.kind, "delta": e.delta, "sigma": e.sigma} for e in self.events],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RdpLedger":
        try:
            ledger = cls(doc["orders"], doc.get("eps_rdp"))
            events = [Event(str(e["kind"]), float(e["delta"]), float(e["sigma"])) for e in doc["events"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerFormatError(f"malformed ledger: {exc}") from None
        for e in events:
            if e.kind not in ("check", "answer"):
                raise LedgerFormatError(f"malformed ledger: unknown event kind {e.kind!r}")
        ledger.events = events
        if doc.get("eps_rdp") is None:
            # recompute from the log when only events were stored
            for e in events:
                ledger.eps_rdp += ledger.cost(e.kind, e.delta, e.sigma)
        return ledger

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "RdpLedger":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise LedgerFormatError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise LedgerFormatError(f"{path}: expected a JSON object")
        return cls.from_json(doc)


def record_event(ledger: RdpLedger, kind: str, sensitivity: float, sigma: float) -> RdpLedger:
    return ledger.record(kind, sensitivity, sigma)


def to_dp(ledger: RdpLedger, delta: float) -> DpGuarantee:
    """Tightest (eps, delta) over the ledger's orders: min eps(l) + ln(1/delta)/(l-1)."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    orders = np.asarray(ledger.orders)
    eps = ledger.eps_rdp + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return DpGuarantee(float(eps[best]), float(delta), float(orders[best]))
