"""Mission scenarios: forest presets with a start and goal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..forest import ForestScene, add_thin_branches, generate_forest


@dataclass(frozen=True)
class MissionScenario:
    """Straight start-to-goal flight through a generated stand.

    Start and goal sit at mid-width of the extent, ``margin`` meters inside
    its ends; small clearings keep trees off the takeoff and landing spots.
    """

    name: str = "evo-medium"
    density: float = 650.0  # trees/ha
    dbh_mean: float = 28.0
    dbh_sd: float = 8.0
    flight_length: float = 36.0
    width: float = 30.0
    margin: float = 5.0
    altitude: float = 1.3
    floor_z: float = 0.5
    ceiling_z: float = 2.25
    clearing_radius: float = 1.5
    thin_branches: float = 0.0  # branches per tree; 0 disables

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (0.0, 0.0, self.flight_length + 2 * self.margin, self.width)

    @property
    def start(self) -> np.ndarray:
        return np.array([self.margin, self.width / 2, self.altitude])

    @property
    def goal(self) -> np.ndarray:
        return np.array([self.margin + self.flight_length, self.width / 2, self.altitude])

    def scene(self, seed: int) -> ForestScene:
        clearings = [(float(self.start[0]), float(self.start[1]), self.clearing_radius),
                     (float(self.goal[0]), float(self.goal[1]), self.clearing_radius)]
        if self.density <= 0:
            return ForestScene((), self.extent)
        scene = generate_forest(self.density, self.extent, self.dbh_mean, self.dbh_sd, seed,
                                clearings=clearings)
        if self.thin_branches > 0:
            scene = add_thin_branches(scene, self.thin_branches, seed=seed + 1)
        return scene


PRESETS = {
    "evo-medium": MissionScenario(),
    "evo-difficult": MissionScenario(name="evo-difficult", density=2000.0, dbh_mean=17.0, dbh_sd=6.0,
                                     flight_length=42.0, ceiling_z=2.75),
    "empty": MissionScenario(name="empty", density=0.0),
}


def preset(name: str) -> MissionScenario:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}") from None
