"""Penning-trap eigenfrequencies and the ion/quartz coupling constant."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple


class TrapDomainError(ValueError):
    """Raised when a trap configuration does not confine the ion."""


@dataclass(frozen=True)
class TrapConfig:
    """Ideal Penning trap holding a cloud of identical ions.

    All quantities SI. ``geom_factor`` and ``electrode_half_gap`` describe the
    pick-up electrode and have no defaults on purpose.
    """

    magnetic_field: float
    ring_voltage: float
    char_distance: float
    ion_mass: float
    ion_charge: float
    geom_factor: float
    electrode_half_gap: float
    ion_count: int = 1

    def __post_init__(self):
        if not self.magnetic_field > 0:
            raise TrapDomainError(f"magnetic_field must be > 0, got {self.magnetic_field}")
        if not self.char_distance > 0:
            raise TrapDomainError(f"char_distance must be > 0, got {self.char_distance}")
        if not self.electrode_half_gap > 0:
            raise TrapDomainError(
                f"electrode_half_gap must be > 0, got {self.electrode_half_gap}"
            )
        if not self.ion_mass > 0:
            raise TrapDomainError(f"ion_mass must be > 0, got {self.ion_mass}")
        if int(self.ion_count) != self.ion_count or self.ion_count < 1:
            raise TrapDomainError(f"ion_count must be an integer >= 1, got {self.ion_count}")


@dataclass(frozen=True)
class QuartzConfig:
    """Quartz resonator mode. ``piezo_constant`` is an opaque scale; only the
    ratio ``k_over_c`` enters the model."""

    capacitance: float
    mode_mass: float
    omega_q: float
    piezo_constant: float
    quality_factor: float
    temperature: float
    v0: float

    def __post_init__(self):
        for name in ("capacitance", "mode_mass", "omega_q", "quality_factor",
                     "temperature", "v0"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"QuartzConfig.{name} must be > 0, got {value}")

    @property
    def k_over_c(self) -> float:
        return self.piezo_constant / self.capacitance

    @property
    def gamma_q(self) -> float:
        """Energy damping rate omega_q / Q in rad/s."""
        return self.omega_q / self.quality_factor


def cyclotron_frequency(cfg: TrapConfig) -> float:
    """Free-space cyclotron frequency q B / m in rad/s."""
    return cfg.ion_charge * cfg.magnetic_field / cfg.ion_mass


def axial_frequency(cfg: TrapConfig) -> float:
    """Axial frequency sqrt(q U0 / (m d^2)) in rad/s."""
    radicand = cfg.ion_charge * cfg.ring_voltage / (cfg.ion_mass * cfg.char_distance**2)
    # U0 = 0 is the degenerate (no quadrupole) limit, allowed
    if not radicand >= 0:
        raise TrapDomainError(
            "non-confining axial polarity: q*U0 = "
            f"{cfg.ion_charge * cfg.ring_voltage:.6g} must not be negative"
        )
    return math.sqrt(radicand)


def radial_frequencies(cfg: TrapConfig) -> tuple[float, float]:
    """Return (omega_plus, omega_minus) in rad/s.

    Raises TrapDomainError when omega_c^2 - 2 omega_z^2 <= 0.
    """
    wc = cyclotron_frequency(cfg)
    wz = axial_frequency(cfg)
    disc = wc * wc - 2.0 * wz * wz
    if not disc > 0:
        raise TrapDomainError(
            f"trapping condition violated: omega_c^2 - 2 omega_z^2 = {disc:.6g} <= 0"
        )
    root = math.sqrt(disc)
    w_plus = 0.5 * (wc + root)
    # omega_plus * omega_minus = omega_z^2 / 2, avoids cancellation in (wc - root)
    w_minus = 0.5 * wz * wz / w_plus
    return w_plus, w_minus


class CouplingConstant(NamedTuple):
    exact: complex
    approximate: complex

    def select(self, form: str = "exact") -> complex:
        if form not in ("exact", "approximate"):
            raise ValueError(f"unknown coupling form {form!r}")
        return self.exact if form == "exact" else self.approximate


def coupling_constant(trap: TrapConfig, quartz: QuartzConfig,
                      omega_plus: float, omega_minus: float) -> CouplingConstant:
    """Ion-quartz coupling g in rad/s, both the full and the
    omega_minus << omega_plus, omega_q ~ omega_plus form.

    g is purely imaginary with positive imaginary part for positive inputs.
    """
    if not omega_plus > omega_minus:
        raise TrapDomainError(
            f"need omega_plus > omega_minus, got {omega_plus} <= {omega_minus}"
        )
    prefactor = quartz.k_over_c * trap.ion_charge * trap.geom_factor / (
        8.0 * trap.electrode_half_gap)
    n = trap.ion_count
    exact = prefactor * (quartz.omega_q + 2.0 * omega_minus) * math.sqrt(
        n * quartz.mode_mass * quartz.omega_q
        / (trap.ion_mass * (omega_plus - omega_minus)))
    approx = prefactor * omega_plus * math.sqrt(n * quartz.mode_mass / trap.ion_mass)
    return CouplingConstant(complex(0.0, exact), complex(0.0, approx))
