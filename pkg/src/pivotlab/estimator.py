"""Online logistic recoverability estimator ``P(success | r) = sigmoid(w*r + b)``."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

DEFAULT_CAPACITY = 4096
DEFAULT_EPOCHS = 50
DEFAULT_LR = 0.5
MAX_HALVINGS = 60


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _bce(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


@dataclass
class EstimatorState:
    capacity: int = DEFAULT_CAPACITY
    w: float = 0.0
    b: float = 0.0
    buffer: deque = field(default_factory=deque)
    steps_since_update: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise DomainError("capacity must be >= 1")
        self.buffer = deque(self.buffer, maxlen=self.capacity)

    def predict(self, r: float) -> float:
        if not 0.0 < r < 1.0:
            raise DomainError(f"normalized depth must lie in (0, 1), got {r}")
        return _sigmoid(self.w * r + self.b)

    def record(self, r: float, y: int) -> None:
        if y not in (0, 1):
            raise DomainError(f"label must be 0 or 1, got {y!r}")
        if not 0.0 < r < 1.0:
            raise DomainError(f"normalized depth must lie in (0, 1), got {r}")
        self.buffer.append((float(r), int(y)))
        self.steps_since_update += 1

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        data = np.array(self.buffer, dtype=np.float64).reshape(-1, 2)
        return data[:, 0], data[:, 1]

    def bce(self) -> float:
        r, y = self.arrays()
        return _bce(self.w * r + self.b, y)

    def update(self, epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LR) -> float | None:
        """Full-batch gradient descent on the buffer's mean BCE.

        Steps are taken in standardized-feature coordinates (same model,
        better conditioned) and mapped back to ``(w, b)``.  A step that would
        raise the loss is retried at half the rate.  Returns the final loss,
        or ``None`` if the buffer is empty.
        """
        if not self.buffer:
            return None
        r, y = self.arrays()
        mu = float(r.mean())
        sd = float(r.std()) or 1.0
        x = (r - mu) / sd
        u, c = self.w * sd, self.b + self.w * mu
        start = _bce(self.w * r + self.b, y)
        loss = _bce(u * x + c, y)
        for _ in range(epochs):
            z = u * x + c
            g = 1.0 / (1.0 + np.exp(-z)) - y
            gu, gc = float(np.mean(g * x)), float(np.mean(g))
            step = lr
            for _ in range(MAX_HALVINGS):
                nu, nc = u - step * gu, c - step * gc
                new = _bce(nu * x + nc, y)
                if new <= loss:
                    break
                step *= 0.5
            else:
                break
            u, c, loss = nu, nc, new
        w, b = u / sd, c - u * mu / sd
        final = _bce(w * r + b, y)
        if final <= start:
            self.w, self.b = w, b
        else:
            final = start
        self.steps_since_update = 0
        return final

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "w": self.w,
            "b": self.b,
            "buffer": [list(e) for e in self.buffer],
            "steps_since_update": self.steps_since_update,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EstimatorState":
        return cls(
            capacity=int(doc["capacity"]),
            w=float(doc["w"]),
            b=float(doc["b"]),
            buffer=deque((float(r), int(y)) for r, y in doc["buffer"]),
            steps_since_update=int(doc.get("steps_since_update", 0)),
        )


def init_estimator(capacity: int = DEFAULT_CAPACITY) -> EstimatorState:
    return EstimatorState(capacity=capacity)
