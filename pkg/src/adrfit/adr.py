"""Semi-linear advection-diffusion-reaction systems on a 1-D interval.

A system couples per-component linear transport with stoichiometric
reaction kinetics.  Stationary phases are ordinary components with zero
velocity and zero diffusion, so a single state vector covers mobile and
bound species alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, SimulationFailure

__all__ = [
    "ComponentSet",
    "TransportCoefficients",
    "StoichiometricKinetics",
    "InletProgram",
    "InitialProfile",
    "ADRSystem",
    "flux",
    "reaction",
    "validate_system",
    "no_reaction",
]


@dataclass(frozen=True)
class ComponentSet:
    """Ordered component identifiers with a mobile/stationary flag each.

    The ordering is fixed for the lifetime of a system and defines the
    state-vector layout everywhere downstream.
    """

    names: tuple[str, ...]
    mobile: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise InvalidInputError("component names must be unique")
        if len(self.names) != len(self.mobile):
            raise InvalidInputError("names and mobility flags differ in length")
        if not any(self.mobile):
            raise InvalidInputError("at least one component must be mobile")

    @property
    def n_components(self) -> int:
        return len(self.names)

    @property
    def mobile_indices(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.mobile))

    @property
    def stationary_indices(self) -> np.ndarray:
        return np.flatnonzero(~np.asarray(self.mobile))

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class TransportCoefficients:
    """Per-component velocity [mm/s] and diffusion coefficient [mm^2/s]."""

    velocity: np.ndarray
    diffusion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        object.__setattr__(self, "diffusion", np.asarray(self.diffusion, dtype=float))
        if self.velocity.shape != self.diffusion.shape:
            raise InvalidInputError("velocity and diffusion differ in shape")


@dataclass(frozen=True)
class StoichiometricKinetics:
    """Reaction kinetics in stoichiometric form R(c, p) = nu^T r(c, p).

    ``rate_fn`` maps a concentration vector (or a matrix of column vectors,
    trailing axis over evaluation points) and a parameter vector to the
    kinetic rates.  The Jacobian callbacks must broadcast the same way and
    agree with finite differences of ``rate_fn``.
    """

    stoich: np.ndarray
    rate_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rate_jac_c: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rate_jac_p: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n_params: int

    def __post_init__(self):
        object.__setattr__(self, "stoich", np.asarray(self.stoich, dtype=float))
        if self.stoich.ndim != 2:
            raise InvalidInputError("stoichiometric matrix must be 2-D")

    @property
    def n_rates(self) -> int:
        return self.stoich.shape[0]


def no_reaction(n_components: int, n_params: int = 0) -> StoichiometricKinetics:
    """Kinetics with an empty rate vector (pure transport)."""

    def _rates(c, p):
        return np.zeros((0,) + np.shape(c)[1:])

    def _jac_c(c, p):
        return np.zeros((0, n_components) + np.shape(c)[1:])

    def _jac_p(c, p):
        return np.zeros((0, n_params) + np.shape(c)[1:])

    return StoichiometricKinetics(
        stoich=np.zeros((0, n_components)),
        rate_fn=_rates,
        rate_jac_c=_jac_c,
        rate_jac_p=_jac_p,
        n_params=n_params,
    )


@dataclass(frozen=True)
class InletProgram:
    """Piecewise-linear inlet concentrations for the mobile components.

    Evaluation outside [first, last] breakpoint clamps to the endpoint
    values, which is also how post-program holds are realized.
    """

    breakpoints: np.ndarray
    values: np.ndarray  # (n_breakpoints, n_mobile)

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", np.asarray(self.breakpoints, dtype=float))
        object.__setattr__(self, "values", np.atleast_2d(np.asarray(self.values, dtype=float)))
        if self.breakpoints.ndim != 1 or len(self.breakpoints) != self.values.shape[0]:
            raise InvalidInputError("breakpoints and values are inconsistent")
        if len(self.breakpoints) > 1 and np.any(np.diff(self.breakpoints) <= 0):
            raise InvalidInputError("breakpoints must be strictly ascending")
        if np.any(self.values < 0):
            raise InvalidInputError("inlet concentrations must be nonnegative")

    def __call__(self, t: float) -> np.ndarray:
        return np.array(
            [np.interp(t, self.breakpoints, self.values[:, j]) for j in range(self.values.shape[1])]
        )

    @property
    def end_time(self) -> float:
        return float(self.breakpoints[-1])


@dataclass(frozen=True)
class InitialProfile:
    """Initial concentration profile z in [0, L] -> component vector."""

    profile: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def constant(cls, values) -> "InitialProfile":
        values = np.asarray(values, dtype=float)

        def _profile(z):
            z = np.asarray(z, dtype=float)
            return np.repeat(values[:, None], z.size, axis=1)

        return cls(profile=_profile)

    def __call__(self, z) -> np.ndarray:
        return self.profile(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class ADRSystem:
    """One advection-diffusion-reaction system on the interval [0, L]."""

    length: float
    components: ComponentSet
    transport: TransportCoefficients
    kinetics: StoichiometricKinetics
    inlet: InletProgram
    initial: InitialProfile


def flux(c: np.ndarray, dzc: np.ndarray, transport: TransportCoefficients) -> np.ndarray:
    """Total transportive flux v*c - D*dc/dz, componentwise."""
    c = np.asarray(c, dtype=float)
    dzc = np.asarray(dzc, dtype=float)
    if c.shape != transport.velocity.shape or dzc.shape != transport.velocity.shape:
        raise InvalidInputError(
            f"flux arguments have shape {c.shape}/{dzc.shape}, "
            f"expected {transport.velocity.shape}"
        )
    return transport.velocity * c - transport.diffusion * dzc


def reaction(c: np.ndarray, p: np.ndarray, kinetics: StoichiometricKinetics) -> np.ndarray:
    """Net production nu^T r(c, p) for one concentration vector."""
    rates = kinetics.rate_fn(np.asarray(c, dtype=float), np.asarray(p, dtype=float))
    if not np.all(np.isfinite(rates)):
        raise SimulationFailure("kinetic rates are not finite", state=np.asarray(c))
    return kinetics.stoich.T @ rates


def validate_system(system: ADRSystem) -> list[str]:
    """Check structural invariants; returns the list of violations (empty if valid)."""
    report = []
    n_c = system.components.n_components
    if not system.length > 0:
        report.append(f"domain length must be positive, got {system.length}")
    if system.transport.velocity.shape != (n_c,):
        report.append(
            f"transport arrays have shape {system.transport.velocity.shape}, "
            f"expected ({n_c},)"
        )
    else:
        if np.any(system.transport.diffusion < 0):
            report.append("diffusion coefficients must be nonnegative")
        stationary = system.components.stationary_indices
        if np.any(system.transport.velocity[stationary] != 0) or np.any(
            system.transport.diffusion[stationary] != 0
        ):
            report.append("stationary components must have zero velocity and diffusion")
    if system.kinetics.stoich.shape[1] != n_c:
        report.append(
            f"stoichiometric matrix has {system.kinetics.stoich.shape[1]} columns, "
            f"expected {n_c}"
        )
    n_mobile = len(system.components.mobile_indices)
    if system.inlet.values.shape[1] != n_mobile:
        report.append(
            f"inlet program provides {system.inlet.values.shape[1]} components, "
            f"expected {n_mobile} mobile"
        )
    try:
        c0 = system.initial(np.array([0.0, system.length / 2.0, system.length]))
        if c0.shape[0] != n_c:
            report.append(f"initial profile returns {c0.shape[0]} components, expected {n_c}")
        elif np.any(c0 < 0):
            report.append("initial profile must be nonnegative")
    except Exception as exc:  # profile is user code
        report.append(f"initial profile evaluation failed: {exc}")
    return report
