"""Behavior knobs shared by the follower and leader layers."""

from __future__ import annotations

from dataclasses import dataclass, field

from .qp import QpSettings


@dataclass
class GameConfig:
    """Tolerances and caps for equilibrium computation.

    eps_follower is a relative-absolute hybrid: follower i's certification
    threshold is eps_follower * max(1, |V_i|).  eps_leader is absolute and
    defaults to exact comparison.
    """

    eps_follower: float = 1e-4
    max_sweeps: int = 100
    eps_leader: float = 0.0
    max_rounds: int = 100
    lattice_cap: int = 10_000
    multi_start: int = 0
    seed: int = 0
    jobs: int = 1
    qp: QpSettings = field(default_factory=QpSettings)

    def follower_threshold(self, value: float) -> float:
        return self.eps_follower * max(1.0, abs(value))
