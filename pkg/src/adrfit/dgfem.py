"""Nodal discontinuous Galerkin semi-discretization of ADR systems.

Each component field is expanded in Lagrange polynomials on
Legendre-Gauss-Lobatto nodes per element.  Advective coupling uses upwind
numerical fluxes, diffusive coupling a central flux with an interior
penalty tau = (p+1)^2/h, and the inlet/outlet closure prescribes the total
flux (v*c_in at the inlet, purely advective outflow at the outlet).

Because transport is linear with constant coefficients, the spatial
operator of every component reduces to a constant matrix plus an inlet
injection vector; both are assembled once by probing the flux routine
with unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import legendre as npleg

from .adr import ADRSystem, validate_system
from .errors import InvalidInputError

__all__ = [
    "Mesh1D",
    "DGOperators",
    "SemiDiscreteSystem",
    "build_mesh",
    "reference_operators",
    "semidiscretize",
    "rhs_jacobians",
    "evaluate_outlet",
]


def gauss_lobatto_nodes(order: int) -> np.ndarray:
    """LGL nodes on [-1, 1] for polynomial order >= 1."""
    if order < 1:
        raise InvalidInputError("polynomial order must be >= 1")
    if order == 1:
        return np.array([-1.0, 1.0])
    # interior nodes are the roots of P'_order
    coeffs = np.zeros(order + 1)
    coeffs[order] = 1.0
    interior = npleg.legroots(npleg.legder(coeffs))
    return np.concatenate(([-1.0], np.sort(interior), [1.0]))


@dataclass(frozen=True)
class Mesh1D:
    """Uniform 1-D mesh with per-element LGL nodes."""

    boundaries: np.ndarray  # (n_elements + 1,)
    order: int
    ref_nodes: np.ndarray  # (order + 1,) on [-1, 1]
    nodes: np.ndarray  # (n_elements, order + 1) physical coordinates

    @property
    def n_elements(self) -> int:
        return len(self.boundaries) - 1

    @property
    def nodes_per_element(self) -> int:
        return self.order + 1

    @property
    def n_nodes(self) -> int:
        return self.n_elements * self.nodes_per_element

    @property
    def element_width(self) -> float:
        return float(self.boundaries[1] - self.boundaries[0])

    @property
    def length(self) -> float:
        return float(self.boundaries[-1])


def build_mesh(length: float, n_elements: int, order: int) -> Mesh1D:
    """Uniform mesh of ``n_elements`` elements of order ``order`` on [0, length]."""
    if length <= 0 or n_elements < 1 or order < 1:
        raise InvalidInputError(
            f"invalid mesh request (length={length}, elements={n_elements}, order={order})"
        )
    boundaries = np.linspace(0.0, length, n_elements + 1)
    ref = gauss_lobatto_nodes(order)
    left = boundaries[:-1][:, None]
    h = length / n_elements
    nodes = left + (ref[None, :] + 1.0) * (h / 2.0)
    return Mesh1D(boundaries=boundaries, order=order, ref_nodes=ref, nodes=nodes)


@dataclass(frozen=True)
class DGOperators:
    """Reference-element operators shared by all elements of a uniform mesh."""

    diff: np.ndarray  # (n, n) reference differentiation matrix
    mass: np.ndarray  # (n, n) reference mass matrix
    inv_mass: np.ndarray
    lift_left: np.ndarray  # inv_mass @ e_first
    lift_right: np.ndarray  # inv_mass @ e_last
    penalty_scale: float  # (p+1)^2; divide by h for the face penalty


def reference_operators(order: int) -> DGOperators:
    r = gauss_lobatto_nodes(order)
    n = order + 1
    # orthonormal Legendre Vandermonde
    scale = np.sqrt((2.0 * np.arange(n) + 1.0) / 2.0)
    V = np.polynomial.legendre.legvander(r, order) * scale[None, :]
    coeffs = np.eye(n) * scale[:, None]
    Vr = np.stack([npleg.legval(r, npleg.legder(coeffs[j])) for j in range(n)], axis=1)
    Dr = Vr @ np.linalg.inv(V)
    inv_mass = V @ V.T
    mass = np.linalg.inv(inv_mass)
    return DGOperators(
        diff=Dr,
        mass=mass,
        inv_mass=inv_mass,
        lift_left=inv_mass[:, 0].copy(),
        lift_right=inv_mass[:, -1].copy(),
        penalty_scale=float(n * n),
    )


def _transport_rhs(
    u: np.ndarray,
    c_in: float,
    v: float,
    D: float,
    ops: DGOperators,
    h: float,
) -> np.ndarray:
    """RHS of du/dt = -d/dz (v u - D du/dz) for one component, shape (n_el, n).

    Interior faces use upwind advection and central diffusion with penalty
    tau = (p+1)^2/h; the inlet face prescribes total flux v*c_in, the
    outlet face a purely advective flux from the interior value.
    """
    rx = 2.0 / h
    du = ops.diff @ u.T  # (n, n_el)
    grad = rx * du.T
    if D != 0.0:
        # gradient correction from central traces at interior faces
        um = u[:-1, -1]
        up = u[1:, 0]
        jump = 0.5 * (up - um)  # u* - u^- on the left side, u* - u^+ = -jump
        corr = np.zeros_like(u)
        corr[:-1] += rx * jump[:, None] * ops.lift_right[None, :]
        corr[1:] += rx * jump[:, None] * ops.lift_left[None, :]
        grad = grad + corr

    flux_n = v * u - D * grad

    # single-valued numerical fluxes at the n_el+1 faces
    n_faces = u.shape[0] + 1
    fstar = np.empty(n_faces)
    um = u[:-1, -1]
    up = u[1:, 0]
    fstar[1:-1] = v * um if v >= 0 else v * up
    if D != 0.0:
        qm = grad[:-1, -1]
        qp = grad[1:, 0]
        tau = ops.penalty_scale / h
        fstar[1:-1] += -D * 0.5 * (qm + qp) + D * tau * (um - up)
    fstar[0] = v * c_in
    fstar[-1] = v * u[-1, -1]

    out = -rx * (ops.diff @ flux_n.T).T
    out += rx * (flux_n[:, -1] - fstar[1:])[:, None] * ops.lift_right[None, :]
    out -= rx * (flux_n[:, 0] - fstar[:-1])[:, None] * ops.lift_left[None, :]
    return out


def transport_operator(
    mesh: Mesh1D, ops: DGOperators, v: float, D: float
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble (A, b) with rhs = A u + b * c_in(t) by probing unit vectors."""
    m = mesh.n_nodes
    shape = (mesh.n_elements, mesh.nodes_per_element)
    A = np.empty((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        A[:, j] = _transport_rhs(e.reshape(shape), 0.0, v, D, ops, mesh.element_width).ravel()
    b = _transport_rhs(np.zeros(shape), 1.0, v, D, ops, mesh.element_width).ravel()
    return A, b


class SemiDiscreteSystem:
    """Method-of-lines form dx/dt = f(t, x, p) of an ADR system.

    The state layout is component-major: for each tracked component, all
    ``n_elements * (order+1)`` nodal values in element order.  Stationary
    components carry no transport operator and receive kinetics only.
    """

    def __init__(self, system: ADRSystem, mesh: Mesh1D):
        report = validate_system(system)
        if report:
            raise InvalidInputError("refusing to discretize an invalid system: " + "; ".join(report))
        if abs(mesh.length - system.length) > 1e-12 * max(1.0, system.length):
            raise InvalidInputError("mesh span does not match the system domain")
        self.system = system
        self.mesh = mesh
        self.ops = reference_operators(mesh.order)
        self.n_components = system.components.n_components
        self.n_nodes = mesh.n_nodes
        self.n_x = self.n_components * self.n_nodes

        # one transport matrix per distinct mobile (v, D) pair
        self._matrices: dict[tuple[float, float], tuple[np.ndarray, np.ndarray]] = {}
        self.transport_matrices: list[tuple[np.ndarray, np.ndarray] | None] = []
        mobile = set(system.components.mobile_indices.tolist())
        for i in range(self.n_components):
            if i not in mobile:
                self.transport_matrices.append(None)
                continue
            key = (float(system.transport.velocity[i]), float(system.transport.diffusion[i]))
            if key not in self._matrices:
                self._matrices[key] = transport_operator(mesh, self.ops, *key)
            self.transport_matrices.append(self._matrices[key])

        self.mobile_indices = system.components.mobile_indices
        # position of each mobile component in the inlet-program column order
        self._inlet_cols = {int(i): k for k, i in enumerate(self.mobile_indices)}
        self.outlet_indices = np.array(
            [i * self.n_nodes + self.n_nodes - 1 for i in self.mobile_indices]
        )

        # exact nodal integration weights per component field
        w_ref = self.ops.mass @ np.ones(mesh.nodes_per_element)
        self.mass_vector = np.tile(w_ref * (mesh.element_width / 2.0), mesh.n_elements)

        # scatter indices for the per-node kinetics Jacobian blocks
        n_c, m = self.n_components, self.n_nodes
        i_idx, j_idx, m_idx = np.meshgrid(
            np.arange(n_c), np.arange(n_c), np.arange(m), indexing="ij"
        )
        self._jac_flat_idx = ((i_idx * m + m_idx) * self.n_x + (j_idx * m + m_idx)).ravel()

    # -- state layout -------------------------------------------------

    def pack(self, fields: np.ndarray) -> np.ndarray:
        fields = np.asarray(fields, dtype=float)
        if fields.shape != (self.n_components, self.n_nodes):
            raise InvalidInputError(
                f"expected fields of shape {(self.n_components, self.n_nodes)}, got {fields.shape}"
            )
        return fields.reshape(-1).copy()

    def unpack(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_x,):
            raise InvalidInputError(f"expected state of length {self.n_x}, got {x.shape}")
        return x.reshape(self.n_components, self.n_nodes)

    def initial_state(self) -> np.ndarray:
        z = self.mesh.nodes.reshape(-1)
        return self.pack(self.system.initial(z))

    # -- evaluators ----------------------------------------------------

    def rhs(self, t: float, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        fields = x.reshape(self.n_components, self.n_nodes)
        out = np.zeros_like(fields)
        c_in = self.system.inlet(t)
        for i in self.mobile_indices:
            A, b = self.transport_matrices[i]
            out[i] = A @ fields[i] + b * c_in[self._inlet_cols[int(i)]]
        rates = self.system.kinetics.rate_fn(fields, p)
        if rates.shape[0]:
            out += self.system.kinetics.stoich.T @ rates
        return out.reshape(-1)

    def jac_x(self, t: float, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        fields = x.reshape(self.n_components, self.n_nodes)
        m = self.n_nodes
        J = np.zeros((self.n_x, self.n_x))
        for i in self.mobile_indices:
            A, _ = self.transport_matrices[i]
            J[i * m : (i + 1) * m, i * m : (i + 1) * m] = A
        jc = self.system.kinetics.rate_jac_c(fields, p)  # (n_r, n_c, m)
        if jc.shape[0]:
            blocks = np.einsum("li,ljm->ijm", self.system.kinetics.stoich, jc)
            J.ravel()[self._jac_flat_idx] += blocks.ravel()
        return J

    def jac_p(self, t: float, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        fields = x.reshape(self.n_components, self.n_nodes)
        jp = self.system.kinetics.rate_jac_p(fields, p)  # (n_r, n_p, m)
        n_p = jp.shape[1]
        if not jp.shape[0]:
            return np.zeros((self.n_x, n_p))
        blocks = np.einsum("li,lkm->imk", self.system.kinetics.stoich, jp)
        return blocks.reshape(self.n_x, n_p)

    # -- observation helpers --------------------------------------------

    def outlet_values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] < self.n_x:
            raise InvalidInputError(f"state has {x.shape[-1]} entries, expected >= {self.n_x}")
        return x[..., self.outlet_indices]

    def component_mass(self, x: np.ndarray) -> np.ndarray:
        """Integral of each component field over the domain."""
        return self.unpack(np.asarray(x)[: self.n_x]) @ self.mass_vector


def semidiscretize(system: ADRSystem, mesh: Mesh1D) -> SemiDiscreteSystem:
    return SemiDiscreteSystem(system, mesh)


def rhs_jacobians(sd: SemiDiscreteSystem) -> tuple[Callable, Callable]:
    """State and parameter Jacobian evaluators of the semi-discrete RHS."""
    return sd.jac_x, sd.jac_p


def evaluate_outlet(sd: SemiDiscreteSystem, x: np.ndarray) -> np.ndarray:
    """Mobile-component concentrations at z = L, in mobile-index order."""
    return sd.outlet_values(x)
