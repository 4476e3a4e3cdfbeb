"""Shared enums and small value types used across the pipeline."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass

WINDOW_LENGTHS = (10, 60, 600, 3600)
ROTATION_PERIODS = (60, 120, 180, 300, 600)


class Transport(str, enum.Enum):
    TCP = "TCP"
    UDP = "UDP"
    OTHER = "OTHER"


class Direction(str, enum.Enum):
    UPLINK = "UPLINK"
    DOWNLINK = "DOWNLINK"


class Label(str, enum.Enum):
    ESSENTIAL = "essential"
    NON_ESSENTIAL = "non_essential"

    @property
    def target(self) -> int:
        """Model encoding: essential is the positive logistic output."""
        return 1 if self is Label.ESSENTIAL else 0

    @classmethod
    def from_target(cls, value: int) -> "Label":
        return cls.ESSENTIAL if value else cls.NON_ESSENTIAL

    @classmethod
    def parse(cls, text: str) -> "Label":
        t = text.strip().lower().replace("-", "_")
        if t in ("essential", "e", "1", "required"):
            return cls.ESSENTIAL
        if t in ("non_essential", "ne", "0", "non_required"):
            return cls.NON_ESSENTIAL
        raise ValueError(f"unknown label {text!r}")


class KeyKind(str, enum.Enum):
    DOMAIN = "DOMAIN"
    IP = "IP"


@dataclass(frozen=True, order=True)
class DestinationKey:
    value: str
    kind: KeyKind

    def __post_init__(self):
        if not self.value:
            raise ValueError("destination key must be non-empty")

    def __str__(self) -> str:
        return self.value

    @classmethod
    def ip(cls, addr: str) -> "DestinationKey":
        return cls(addr, KeyKind.IP)

    @classmethod
    def domain(cls, name: str) -> "DestinationKey":
        return cls(name, KeyKind.DOMAIN)

    @classmethod
    def from_string(cls, text: str) -> "DestinationKey":
        """Rebuild a key from its serialized value; IP literals become IP keys."""
        try:
            ipaddress.ip_address(text)
        except ValueError:
            return cls.domain(text)
        return cls.ip(text)


class ContractViolation(ValueError):
    """An input breaks a documented precondition (e.g. wrong vector length)."""


@dataclass(frozen=True)
class Prediction:
    score: float
    label: Label

    @classmethod
    def from_score(cls, score: float, threshold: float = 0.5) -> "Prediction":
        score = float(score)
        return cls(score, Label.ESSENTIAL if score > threshold else Label.NON_ESSENTIAL)
