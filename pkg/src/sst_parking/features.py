"""Feature switches for ablations: demand modes, APL/TPL paradigm, and feature settings 1-4."""

from __future__ import annotations

from dataclasses import dataclass, field

from .demand import MODES

# (target history, target demand, related history, related demand)
SETTING_BLOCKS = {
    1: (True, True, True, True),
    2: (True, True, False, True),
    3: (True, True, True, False),
    4: (True, False, True, True),
}

ABLATIONS = {
    "F": None,
    "F-M": "metro",
    "F-B": "bus",
    "F-R": "ridehailing",
    "F-T": "taxi",
}


@dataclass(frozen=True)
class FeatureConfig:
    modes: tuple[str, ...] = field(default=MODES)
    paradigm: str = "APL"
    setting: int = 1

    def __post_init__(self):
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}")
        object.__setattr__(self, "modes", tuple(m for m in MODES if m in self.modes))
        if self.paradigm not in ("APL", "TPL"):
            raise ValueError("paradigm must be APL or TPL")
        if self.setting not in SETTING_BLOCKS:
            raise ValueError("setting must be 1, 2, 3 or 4")

    @property
    def blocks(self) -> tuple[bool, bool, bool, bool]:
        return SETTING_BLOCKS[self.setting]

    @classmethod
    def ablation(cls, name: str, paradigm: str = "APL", setting: int = 1) -> "FeatureConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")
        drop = ABLATIONS[name]
        return cls(tuple(m for m in MODES if m != drop), paradigm, setting)

    def to_dict(self) -> dict:
        return {"modes": list(self.modes), "paradigm": self.paradigm, "setting": self.setting}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(tuple(d.get("modes", MODES)), d.get("paradigm", "APL"), int(d.get("setting", 1)))
