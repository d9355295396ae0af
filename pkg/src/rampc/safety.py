"""Safe/target set definitions: X_S = {psi(y) > 0}, X_T = {phi(y) < 0}."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .polynomial import Polynomial

OUTPUT_VARS = ("y1", "y2")


@dataclass(frozen=True)
class SafetySpec:
    psi: Polynomial
    phi: Polynomial
    output_box: np.ndarray  # (m, 2) lo/hi in output space

    def __post_init__(self):
        object.__setattr__(self, "output_box", np.asarray(self.output_box, dtype=float))

    def in_region(self, y) -> bool:
        # closure(X_S \ X_T): psi >= 0 and phi >= 0
        return self.psi.eval(y) >= 0.0 and self.phi.eval(y) >= 0.0

    def in_output_box(self, y) -> bool:
        return bool(np.all(y >= self.output_box[:, 0]) and np.all(y <= self.output_box[:, 1]))

    def to_dict(self) -> dict:
        return {
            "psi": self.psi.to_dict(),
            "phi": self.phi.to_dict(),
            "output_box": [[float(a), float(b)] for a, b in self.output_box],
        }

    @staticmethod
    def from_dict(d: dict) -> "SafetySpec":
        return SafetySpec(
            psi=Polynomial.from_dict(d["psi"]),
            phi=Polynomial.from_dict(d["phi"]),
            output_box=np.asarray(d["output_box"], dtype=float),
        )


def _y():
    y1 = Polynomial.var(OUTPUT_VARS, "y1")
    y2 = Polynomial.var(OUTPUT_VARS, "y2")
    return y1, y2


def dubins_sets(output_box=None) -> SafetySpec:
    """Annulus-band safe set and small ellipse target near its lower edge.

    phi = y1^2 + 4(y2+1.7)^2 - 0.4
    psi = 1e-3 (phi - 300)(y1^4 + y2^4 - 16)(y1^4 + y2^4 - 4)
    """
    y1, y2 = _y()
    phi = y1 ** 2 + 4.0 * (y2 + 1.7) ** 2 - 0.4
    quart = y1 ** 4 + y2 ** 4
    psi = 1e-3 * (phi - 300.0) * (quart - 16.0) * (quart - 4.0)
    if output_box is None:
        # top cut removes the interior saddle of psi at (0, 1.774)
        output_box = np.array([[-2.2, 2.2], [-2.2, 0.9]])
    return SafetySpec(psi=psi, phi=phi, output_box=np.asarray(output_box, dtype=float))


def arm_sets(output_box=None) -> SafetySpec:
    """Cubic-band workspace safe set and ellipse target for the arm end effector.

    psi = -(4(y1-2) - 2 y2^3)^2 + 0.8 y2^3 + 10
    phi = (y1-5.5)^2/1.2^2 + (y2-1.8)^2/0.4^2 - 2
    """
    y1, y2 = _y()
    w = 4.0 * (y1 - 2.0) - 2.0 * y2 ** 3
    psi = -(w ** 2) + 0.8 * y2 ** 3 + 10.0
    phi = (y1 - 5.5) ** 2 * (1.0 / 1.2 ** 2) + (y2 - 1.8) ** 2 * (1.0 / 0.4 ** 2) - 2.0
    if output_box is None:
        # y2 floor keeps |grad psi| >= 2.4*0.8^2 on the band ridge (flat point at y2=0)
        output_box = np.array([[0.4, 7.2], [0.8, 2.0]])
    return SafetySpec(psi=psi, phi=phi, output_box=np.asarray(output_box, dtype=float))
