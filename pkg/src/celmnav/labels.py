"""Labeling strategies and the label containers that travel with images.

Five strategies are supported. ``DR`` uses the optical observables
(delta = CoF - CoB in pixels, plus range); the other four are the spacecraft
position in spherical or Cartesian coordinates, expressed either in the
body-fixed AS frame or in the inertial W frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class LabelStrategy(str, enum.Enum):
    DR = "dr"
    AS_SPH = "as_sph"
    AS_CART = "as_cart"
    W_SPH = "w_sph"
    W_CART = "w_cart"

    @property
    def index(self) -> int:
        """1-based index used in dataset notation (e.g. body D, index 1 -> ``D1``)."""
        return list(LabelStrategy).index(self) + 1

    @property
    def frame(self) -> str:
        """Frame the position estimate is compared in."""
        if self in (LabelStrategy.AS_SPH, LabelStrategy.AS_CART):
            return "AS"
        return "W"

    @property
    def frame_group(self) -> str:
        """Reference-frame group used to share encoders across datasets."""
        if self is LabelStrategy.DR:
            return "image"
        return self.frame

    @property
    def spherical(self) -> bool:
        return self in (LabelStrategy.AS_SPH, LabelStrategy.W_SPH)

    @property
    def cartesian(self) -> bool:
        return self in (LabelStrategy.AS_CART, LabelStrategy.W_CART)

    @property
    def n_out(self) -> int:
        # azimuth is fed to the network as a (sin, cos) pair
        return 4 if self.spherical else 3

    @property
    def columns(self) -> tuple[str, str, str]:
        if self is LabelStrategy.DR:
            return ("delta_u", "delta_v", "rho")
        if self.spherical:
            return ("az_deg", "el_deg", "rho")
        return ("x", "y", "z")

    @classmethod
    def parse(cls, text: str) -> "LabelStrategy":
        text = text.strip().lower()
        for s in cls:
            if text in (s.value, s.name.lower(), str(s.index)):
                return s
        raise ValueError(f"unknown labeling strategy {text!r}")


def length_mask(strategy: LabelStrategy) -> np.ndarray:
    """Boolean mask of the label components that carry a length (px or km).

    These are the components rescaled by 128/gamma when moving to S2; angles
    are left untouched.
    """
    if strategy.spherical:
        return np.array([False, False, True])
    return np.array([True, True, True])


@dataclass
class LabelSet:
    """Strategy-specific labels plus the CoB/CoF pixel positions.

    ``values`` holds the three raw label components in the order given by
    ``strategy.columns``. CoB and CoF are carried alongside because the crop
    and resize steps move them even when the strategy does not use them.
    """

    strategy: LabelStrategy
    values: np.ndarray
    cob: np.ndarray = field(default_factory=lambda: np.zeros(2))
    cof: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(3)
        self.cob = np.asarray(self.cob, dtype=float).reshape(2)
        self.cof = np.asarray(self.cof, dtype=float).reshape(2)

    @property
    def delta(self) -> np.ndarray:
        return self.cof - self.cob

    def shifted(self, offset) -> "LabelSet":
        offset = np.asarray(offset, dtype=float)
        return replace(self, values=self.values.copy(), cob=self.cob + offset, cof=self.cof + offset)

    def scaled(self, factor: float) -> "LabelSet":
        values = np.where(length_mask(self.strategy), self.values * factor, self.values)
        return replace(self, values=values, cob=self.cob * factor, cof=self.cof * factor)


def encode_targets(values: np.ndarray, strategy: LabelStrategy) -> np.ndarray:
    """Map raw (n, 3) labels to network targets (n, n_out).

    Spherical labels become (sin az, cos az, el, rho); others pass through.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if not strategy.spherical:
        return values.copy()
    az = np.deg2rad(values[:, 0])
    return np.column_stack([np.sin(az), np.cos(az), values[:, 1], values[:, 2]])


def decode_targets(targets: np.ndarray, strategy: LabelStrategy) -> np.ndarray:
    """Inverse of :func:`encode_targets`; azimuth recovered with atan2."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if not strategy.spherical:
        return targets.copy()
    az = np.rad2deg(np.arctan2(targets[:, 0], targets[:, 1]))
    return np.column_stack([az, targets[:, 2], targets[:, 3]])
