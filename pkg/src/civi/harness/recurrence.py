"""Direct iteration of A_{t+1} = (1 - eta_t + C1 eta_t^2) A_t + C2 zeta_t."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from ..solver import ConfigError


@dataclass(frozen=True)
class RecurrenceCase:
    C_eta: float
    C_zeta: float
    a: float
    b: float
    C1: float
    C2: float
    A1: float
    horizon: int

    def __post_init__(self):
        if not 0.0 < self.a <= 1.0:
            raise ConfigError(f"need 0 < a <= 1, got a={self.a}")
        if not self.C_eta > 1.0 + self.b - self.a:
            raise ConfigError(f"need C_eta > 1 + b - a = {1.0 + self.b - self.a}, got {self.C_eta}")
        if -1.0 < self.b - self.a < 0.0:
            raise ConfigError(f"b - a = {self.b - self.a} lies in (-1, 0)")
        if self.C_zeta < 0 or self.C1 < 0 or self.C2 < 0:
            raise ConfigError("C_zeta, C1 and C2 must be nonnegative")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")

    @classmethod
    def from_yaml(cls, path) -> "RecurrenceCase":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown key(s) {', '.join(sorted(unknown))}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def eta(self, t: int) -> float:
        return self.C_eta / t**self.a

    def zeta(self, t: int) -> float:
        return self.C_zeta / t**self.b


@dataclass
class RecurrenceVerdict:
    holds: bool
    C_A: float
    max_scaled: float  # max_t A_t t^(b-a)
    worst_t: int
    A_last: float
    t_head: int  # the max in C_A runs over t <= t_head

    def to_dict(self) -> dict:
        return asdict(self)


def iterate(case: RecurrenceCase, horizon: int | None = None) -> list[float]:
    """A_1 .. A_horizon with the inequality taken as equality."""
    T = case.horizon if horizon is None else horizon
    A = [case.A1]
    a_t = case.A1
    for t in range(1, T):
        eta = case.C_eta / t**case.a
        a_t = (1.0 - eta + case.C1 * eta * eta) * a_t + case.C2 * case.C_zeta / t**case.b
        A.append(a_t)
    return A


def check_recurrence(case: RecurrenceCase) -> RecurrenceVerdict:
    """Compare A_t t^(b-a) with the constant built in the proof.

    C_A = max_{t <= (C1 C_eta^2)^(1/a) + 1} A_t t^(b-a) + C2 C_zeta / (C_eta - 1 - b + a).
    """
    e = case.b - case.a
    t_head = int(math.floor((case.C1 * case.C_eta**2) ** (1.0 / case.a) + 1.0))
    A = iterate(case, max(case.horizon, t_head))
    scaled = [A[i] * (i + 1) ** e for i in range(len(A))]
    head = max(scaled[:t_head])
    C_A = head + case.C2 * case.C_zeta / (case.C_eta - 1.0 - case.b + case.a)
    upto = scaled[: case.horizon]
    worst = max(range(len(upto)), key=upto.__getitem__)
    return RecurrenceVerdict(
        holds=bool(upto[worst] <= C_A),
        C_A=C_A,
        max_scaled=upto[worst],
        worst_t=worst + 1,
        A_last=A[case.horizon - 1],
        t_head=t_head,
    )
