"""SPH primitives and the 1D compressible solver used for data generation.

Conventions: particle positions are stored unwrapped and only mapped into the
periodic domain when computing distances. Neighborhoods contain all particles
with minimum-image distance strictly below the support radius h, excluding the
particle itself; interpolation sums add the self contribution explicitly where
it belongs (density does, gradients do not since grad W(0) = 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from sfbc.conv import ParticleGraph
from sfbc.errors import ConfigurationError, SimulationFault

# Normalization of the cubic B-spline kernel written over [0, 1]:
# W(r) = sigma_d/h^d * ((1-q)^3 - 4*(1/2-q)^3_+), q = r/h.
# Verified against numerical quadrature (see tests): integral over the
# support equals one in each dimension.
CUBIC_SIGMA = {1: 8.0 / 3.0, 2: 80.0 / (7.0 * np.pi), 3: 16.0 / np.pi}


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "cubic-spline"
    dim: int = 1

    def __post_init__(self):
        if self.kind != "cubic-spline":
            raise ConfigurationError(f"unsupported kernel kind {self.kind!r}")
        if self.dim not in (1, 2, 3):
            raise ConfigurationError("kernel dimension must be 1, 2 or 3")

    def sigma(self, h: float) -> float:
        return CUBIC_SIGMA[self.dim] / h**self.dim


def _cubic_shape(q):
    q = np.asarray(q, dtype=float)
    return np.maximum(1.0 - q, 0.0) ** 3 - 4.0 * np.maximum(0.5 - q, 0.0) ** 3


def _cubic_shape_deriv(q):
    q = np.asarray(q, dtype=float)
    return -3.0 * np.maximum(1.0 - q, 0.0) ** 2 + 12.0 * np.maximum(0.5 - q, 0.0) ** 2


def kernel_eval(spec: KernelSpec, q, h: float):
    """W(q) with q = r/h; zero for q >= 1."""
    return spec.sigma(h) * _cubic_shape(q)


def kernel_grad(spec: KernelSpec, disp, h: float):
    """Gradient of W with respect to x_i for displacement x_i - x_j.

    ``disp`` is already normalized by h (as stored on graph edges). The
    gradient is antisymmetric in the displacement and zero at the origin.
    """
    disp = np.atleast_2d(np.asarray(disp, dtype=float))
    rad = np.linalg.norm(disp, axis=-1)
    mag = spec.sigma(h) * _cubic_shape_deriv(rad) / h
    safe = np.where(rad > 0.0, rad, 1.0)
    return mag[..., None] * disp / safe[..., None]


@dataclass
class ParticleState:
    """positions/velocities: (N, d); areas and masses: (N,)."""

    positions: np.ndarray
    velocities: np.ndarray
    areas: np.ndarray
    masses: np.ndarray
    domain: np.ndarray  # (d, 2) periodic bounds
    h: float
    densities: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        self.domain = np.atleast_2d(np.asarray(self.domain, dtype=float))
        if len(self.positions) == 0 or self.h <= 0:
            raise ConfigurationError("need at least one particle and h > 0")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


def wrap_positions(positions, domain):
    lo = domain[:, 0]
    length = domain[:, 1] - domain[:, 0]
    return lo + np.mod(positions - lo, length)


def minimum_image(delta, lengths):
    return delta - lengths * np.round(delta / lengths)


def _edges_to_graph(n, receivers, senders, disp, h):
    order = np.lexsort((senders, receivers))
    receivers = receivers[order]
    senders = senders[order]
    disp = disp[order] / h
    rad = np.linalg.norm(disp, axis=1)
    return ParticleGraph(n, receivers, senders, disp, rad)


def _brute_force_edges(positions, domain, h):
    n, d = positions.shape
    lengths = domain[:, 1] - domain[:, 0]
    pos = wrap_positions(positions, domain)
    delta = pos[:, None, :] - pos[None, :, :]
    delta = minimum_image(delta, lengths)
    dist2 = (delta**2).sum(axis=2)
    np.fill_diagonal(dist2, np.inf)
    receivers, senders = np.nonzero(dist2 < h * h)
    return receivers.astype(np.int64), senders.astype(np.int64), delta[receivers, senders]


def _cell_list_edges(positions, domain, h):
    n, d = positions.shape
    lengths = domain[:, 1] - domain[:, 0]
    n_cells = np.maximum(np.floor(lengths / h).astype(int), 1)
    if np.any(n_cells < 3):
        return _brute_force_edges(positions, domain, h)
    pos = wrap_positions(positions, domain)
    cell_size = lengths / n_cells
    idx = np.minimum(((pos - domain[:, 0]) / cell_size).astype(int), n_cells - 1)
    flat = np.ravel_multi_index(idx.T, n_cells)
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    starts = np.searchsorted(sorted_flat, np.arange(np.prod(n_cells)))
    counts = np.diff(np.append(starts, n))

    rec_parts, snd_parts, disp_parts = [], [], []
    for offset in product((-1, 0, 1), repeat=d):
        nid = np.ravel_multi_index(((idx + offset) % n_cells).T, n_cells)
        bucket_count = counts[nid]
        total = int(bucket_count.sum())
        if total == 0:
            continue
        receivers = np.repeat(np.arange(n), bucket_count)
        base = np.repeat(starts[nid], bucket_count)
        shift = np.arange(total) - np.repeat(
            np.cumsum(bucket_count) - bucket_count, bucket_count
        )
        senders = order[base + shift]
        delta = minimum_image(pos[receivers] - pos[senders], lengths)
        dist2 = (delta**2).sum(axis=1)
        keep = (dist2 < h * h) & (receivers != senders)
        rec_parts.append(receivers[keep])
        snd_parts.append(senders[keep])
        disp_parts.append(delta[keep])
    if not rec_parts:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty((0, d))
    return (
        np.concatenate(rec_parts).astype(np.int64),
        np.concatenate(snd_parts).astype(np.int64),
        np.concatenate(disp_parts),
    )


def neighbor_search(state: ParticleState, method: str = "auto") -> ParticleGraph:
    """All pairs with minimum-image distance < h, self excluded.

    The cell-list path returns exactly the same edge set as the O(n^2)
    reference; both emit edges sorted by (receiver, sender).
    """
    if method not in ("auto", "bruteforce", "celllist"):
        raise ConfigurationError(f"unknown search method {method!r}")
    pos = state.positions
    if method == "bruteforce" or (method == "auto" and state.n_particles <= 128):
        rec, snd, disp = _brute_force_edges(pos, state.domain, state.h)
    else:
        rec, snd, disp = _cell_list_edges(pos, state.domain, state.h)
    return _edges_to_graph(state.n_particles, rec, snd, disp, state.h)


def number_density(state: ParticleState, graph: ParticleGraph) -> np.ndarray:
    """delta_i = sum_j a_j W_ij over the neighborhood including i itself."""
    spec = KernelSpec(dim=state.dim)
    w = kernel_eval(spec, graph.rad, state.h)
    delta = np.bincount(
        graph.receivers, weights=w * state.areas[graph.senders], minlength=state.n_particles
    )
    return delta + state.areas * kernel_eval(spec, 0.0, state.h)


def summation_density(state: ParticleState, graph: ParticleGraph) -> np.ndarray:
    """rho_i = sum_j m_j W_ij including the self contribution."""
    spec = KernelSpec(dim=state.dim)
    w = kernel_eval(spec, graph.rad, state.h)
    rho = np.bincount(
        graph.receivers, weights=w * state.masses[graph.senders], minlength=state.n_particles
    )
    return rho + state.masses * kernel_eval(spec, 0.0, state.h)


def _scatter_vectors(receivers, values, n):
    out = np.zeros((n, values.shape[1]))
    for axis in range(values.shape[1]):
        out[:, axis] = np.bincount(receivers, weights=values[:, axis], minlength=n)
    return out


def naive_gradient(state: ParticleState, graph: ParticleGraph, quantity) -> np.ndarray:
    """<grad_i A> = sum_j A_j (m_j / rho_j) grad_i W_ij.

    Requires current densities; the self term vanishes since grad W(0) = 0.
    """
    if state.densities is None:
        raise ConfigurationError("densities required for gradient interpolation")
    spec = KernelSpec(dim=state.dim)
    grad_w = kernel_grad(spec, graph.disp, state.h)
    quantity = np.asarray(quantity, dtype=float)
    coeff = quantity * state.masses / state.densities
    return _scatter_vectors(graph.receivers, grad_w * coeff[graph.senders, None], state.n_particles)


def number_density_gradient(state: ParticleState, graph: ParticleGraph) -> np.ndarray:
    """grad delta_i = sum_j a_j grad_i W_ij (the antisymmetric toy target)."""
    spec = KernelSpec(dim=state.dim)
    grad_w = kernel_grad(spec, graph.disp, state.h)
    return _scatter_vectors(
        graph.receivers, grad_w * state.areas[graph.senders, None], state.n_particles
    )


@dataclass(frozen=True)
class SimConfig1D:
    """1D compressible setup; defaults follow the reference protocol.

    The default dt is far above the explicit stability limit of this
    parameter set (see the data generator, which overrides it); it is kept
    here as the documented reference value.
    """

    n_particles: int = 2048
    h_factor: float = 4.0  # h = h_factor * area
    dt: float = 1e-3
    kappa: float = 10.0
    c_s: float = 10.0
    rho0: float = 1000.0
    alpha: float = 1.0
    beta: float = 2.0
    steps: int = 2048
    domain_lo: float = -1.0
    domain_hi: float = 1.0

    @property
    def domain(self) -> np.ndarray:
        return np.array([[self.domain_lo, self.domain_hi]])


def accelerations(state: ParticleState, graph: ParticleGraph, config: SimConfig1D):
    """Pressure + artificial-viscosity forces; pairwise antisymmetric.

    EoS: p = kappa * (rho - rho0). Viscosity is the standard Monaghan form
    applied only to approaching pairs.
    """
    rho = summation_density(state, graph)
    if np.any(rho <= 0.0) or not np.all(np.isfinite(rho)):
        raise SimulationFault("non-positive or non-finite density")
    pressure = config.kappa * (rho - config.rho0)

    i, j = graph.receivers, graph.senders
    x_ij = graph.disp * state.h  # physical displacement
    v_ij = state.velocities[i] - state.velocities[j]
    vx = (v_ij * x_ij).sum(axis=1)
    mu = state.h * vx / ((x_ij**2).sum(axis=1) + 0.01 * state.h**2)
    mu = np.where(vx < 0.0, mu, 0.0)
    rho_bar = 0.5 * (rho[i] + rho[j])
    visc = (-config.alpha * config.c_s * mu + config.beta * mu**2) / rho_bar

    spec = KernelSpec(dim=state.dim)
    grad_w = kernel_grad(spec, graph.disp, state.h)
    coeff = pressure[i] / rho[i] ** 2 + pressure[j] / rho[j] ** 2 + visc
    contrib = -state.masses[j, None] * coeff[:, None] * grad_w
    return _scatter_vectors(i, contrib, state.n_particles), rho


def rk4_step(state: ParticleState, config: SimConfig1D, search_method="auto"):
    """Classic RK4 on (x, v); densities and neighborhoods rebuilt per stage."""

    def rhs(x, v):
        staged = replace_state(state, x, v)
        graph = neighbor_search(staged, search_method)
        acc, rho = accelerations(staged, graph, config)
        return v, acc, rho

    dt = config.dt
    x0, v0 = state.positions, state.velocities
    k1x, k1v, rho = rhs(x0, v0)
    k2x, k2v, _ = rhs(x0 + 0.5 * dt * k1x, v0 + 0.5 * dt * k1v)
    k3x, k3v, _ = rhs(x0 + 0.5 * dt * k2x, v0 + 0.5 * dt * k2v)
    k4x, k4v, _ = rhs(x0 + dt * k3x, v0 + dt * k3v)
    x_new = x0 + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v0 + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise SimulationFault("non-finite state after step")
    out = replace_state(state, x_new, v_new)
    out.densities = rho
    return out


def replace_state(state: ParticleState, positions, velocities) -> ParticleState:
    return ParticleState(
        positions=positions,
        velocities=velocities,
        areas=state.areas,
        masses=state.masses,
        domain=state.domain,
        h=state.h,
        densities=state.densities,
    )


@dataclass
class Trajectory:
    """Frame 0 is the initial condition; frame k the state after k steps."""

    positions: np.ndarray  # (frames, N, d), unwrapped
    velocities: np.ndarray
    areas: np.ndarray
    masses: np.ndarray
    domain: np.ndarray
    h: float
    dt: float

    @property
    def frames(self) -> int:
        return self.positions.shape[0]

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    def state_at(self, frame: int) -> ParticleState:
        return ParticleState(
            positions=self.positions[frame].copy(),
            velocities=self.velocities[frame].copy(),
            areas=self.areas,
            masses=self.masses,
            domain=self.domain,
            h=self.h,
        )


def run_simulation(config: SimConfig1D, initial: ParticleState, frames: int | None = None):
    """Integrate and record ``frames`` snapshots (initial state included).

    Aborts with SimulationFault (carrying the step index) on instability.
    """
    frames = config.steps if frames is None else frames
    n, d = initial.positions.shape
    positions = np.empty((frames, n, d))
    velocities = np.empty((frames, n, d))
    positions[0] = initial.positions
    velocities[0] = initial.velocities
    state = initial
    for k in range(1, frames):
        try:
            state = rk4_step(state, config)
        except SimulationFault as fault:
            raise SimulationFault(f"step {k}: {fault}") from fault
        positions[k] = state.positions
        velocities[k] = state.velocities
    return Trajectory(
        positions, velocities, initial.areas, initial.masses, initial.domain, initial.h, config.dt
    )


def total_momentum(state_or_traj, frame: int | None = None) -> np.ndarray:
    if frame is None:
        return (state_or_traj.masses[:, None] * state_or_traj.velocities).sum(axis=0)
    return (state_or_traj.masses[:, None] * state_or_traj.velocities[frame]).sum(axis=0)
