"""Trajectories (flows of state/action pairs) and preference records."""

from __future__ import annotations

import enum
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Any

BOS = -1  # "previous token" at the first step of a trajectory


@dataclass(frozen=True)
class Trajectory:
    """A fixed-length token sequence generated under one prompt.

    The state at step ``t`` is the context ``(prompt, t, previous token)``
    and the action is ``tokens[t]``.
    """

    prompt: int
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if any(t < 0 for t in self.tokens):
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)

    def steps(self) -> Iterator[tuple[tuple[int, int, int], int]]:
        prev = BOS
        for t, tok in enumerate(self.tokens):
            yield (self.prompt, t, prev), tok
            prev = tok

    def to_json(self) -> dict[str, Any]:
        return {"prompt": self.prompt, "tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Trajectory":
        return cls(int(obj["prompt"]), tuple(obj["tokens"]))


Flow = tuple[Trajectory, ...]


def as_flow(flow: Trajectory | Sequence[Trajectory]) -> Flow:
    """Normalize a single trajectory or a sequence of segments to a flow."""
    if isinstance(flow, Trajectory):
        return (flow,)
    segs = tuple(flow)
    if not segs:
        raise ValueError("a flow needs at least one segment")
    for seg in segs:
        if not isinstance(seg, Trajectory):
            raise TypeError(f"flow segments must be Trajectory, got {type(seg).__name__}")
    return segs


class Label(str, enum.Enum):
    FIRST = "first"
    SECOND = "second"
    TIE = "tie"

    @property
    def kappa(self) -> tuple[float, float]:
        """Target distribution over (first preferred, second preferred)."""
        return _KAPPA[self]


_KAPPA = {Label.FIRST: (1.0, 0.0), Label.SECOND: (0.0, 1.0), Label.TIE: (0.5, 0.5)}


@dataclass(frozen=True)
class PreferenceRecord:
    a: Trajectory
    b: Trajectory
    label: Label
    run_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", Label(self.label))
        if len(self.a) != len(self.b):
            raise ValueError("preference pairs must share trajectory length")
        if self.a == self.b and self.label is not Label.TIE:
            raise ValueError("identical trajectories can only be tied")

    def to_json(self) -> dict[str, Any]:
        out = {"a": self.a.to_json(), "b": self.b.to_json(), "label": self.label.value}
        if self.run_id:
            out["run_id"] = self.run_id
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "PreferenceRecord":
        return cls(
            Trajectory.from_json(obj["a"]),
            Trajectory.from_json(obj["b"]),
            Label(obj["label"]),
            obj.get("run_id", ""),
        )


def check_dataset(records: Sequence[PreferenceRecord]) -> None:
    """Reject conflicting labels for the same unordered pair within one run."""
    seen: dict[tuple[str, Trajectory, Trajectory], Label] = {}
    for rec in records:
        if (rec.run_id, rec.b, rec.a) in seen:
            key, label = (rec.run_id, rec.b, rec.a), _mirror(rec.label)
        else:
            key, label = (rec.run_id, rec.a, rec.b), rec.label
        prior = seen.setdefault(key, label)
        if prior is not label:
            raise ValueError(f"conflicting labels for one pair in run {rec.run_id!r}")


def _mirror(label: Label) -> Label:
    return {Label.FIRST: Label.SECOND, Label.SECOND: Label.FIRST, Label.TIE: Label.TIE}[label]
