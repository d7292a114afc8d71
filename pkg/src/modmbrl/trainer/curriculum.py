"""Terrain difficulty schedule."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class CurriculumState:
    """Per-design difficulty; levels only ever go up.

    By default every design advances together once the slowest one clears
    ``threshold`` metres per episode. ``per_design`` lets each design
    advance on its own result instead.
    """

    levels: dict[str, int]
    max_level: int
    threshold: float = 2.0
    per_design: bool = False
    distances: dict[str, float] = field(default_factory=dict)

    @classmethod
    def start(cls, names, start_level, max_level, threshold=2.0, per_design=False):
        return cls({n: start_level for n in names}, max_level, threshold, per_design)

    def update(self, distances: dict[str, float]) -> bool:
        missing = set(self.levels) - set(distances)
        if missing:
            raise KeyError(f"no distance for {sorted(missing)}")
        self.distances = {k: float(distances[k]) for k in self.levels}
        before = dict(self.levels)
        if self.per_design:
            passed = [n for n, v in self.distances.items() if v >= self.threshold]
        elif min(self.distances.values()) >= self.threshold:
            passed = list(self.levels)
        else:
            passed = []
        for n in passed:
            self.levels[n] = min(self.levels[n] + 1, self.max_level)
        return self.levels != before

    def level_range(self, name: str, start_level: int) -> range:
        return range(min(start_level, self.levels[name]), self.levels[name] + 1)
