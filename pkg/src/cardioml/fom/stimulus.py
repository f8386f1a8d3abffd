"""Applied-current protocols: square pulses in time with optional spatial
support for the tissue problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Pulse:
    start: float
    duration: float
    amplitude: float
    x_lo: float | None = None  # spatial support [x_lo, x_hi]; None = everywhere/0D
    x_hi: float | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("pulse duration must be positive")
        if (self.x_lo is None) != (self.x_hi is None):
            raise ValueError("spatial support needs both endpoints")
        if self.x_lo is not None and self.x_lo > self.x_hi:
            raise ValueError("empty spatial support")

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration


@dataclass
class Stimulus:
    """A list of square pulses; overlap is allowed unless flagged."""

    pulses: list[Pulse]
    forbid_overlap: bool = False

    def __post_init__(self):
        if self.forbid_overlap:
            spans = sorted((p.start, p.start + p.duration) for p in self.pulses)
            for (s0, e0), (s1, _) in zip(spans, spans[1:]):
                if s1 < e0:
                    raise ValueError("overlapping pulses")

    def current(self, t: float) -> float:
        """Summed scalar amplitude at time t (0D problems)."""
        return sum(p.amplitude for p in self.pulses if p.active(t))

    def current_on_grid(self, t: float, xs: np.ndarray) -> np.ndarray:
        """Applied current per grid node at time t (1D problems)."""
        out = np.zeros_like(xs)
        for p in self.pulses:
            if p.active(t):
                if p.x_lo is None:
                    out += p.amplitude
                else:
                    out[(xs >= p.x_lo) & (xs <= p.x_hi)] += p.amplitude
        return out

    @staticmethod
    def from_dicts(entries: list[dict]) -> "Stimulus":
        return Stimulus([Pulse(**e) for e in entries])
