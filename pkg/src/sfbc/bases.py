"""One-dimensional basis families, window functions, coordinate mappings and
separable basis tensors for continuous convolutions on particle data.

All functions are pure and operate on float64 numpy arrays. Displacements are
assumed to be normalized by the support radius, so the natural domain of every
basis is [-1, 1] per axis.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

BASIS_KINDS = (
    "nearest-neighbor",
    "linear",
    "cubic-spline",
    "quartic-spline",
    "quintic-spline",
    "wendland2",
    "gaussian",
    "spiky",
    "bump",
    "fourier",
    "chebyshev",
    "chebyshev2",
    "dmcf",
)

FOURIER_VARIANTS = ("standard", "sfbc", "even", "odd", "odd+x", "odd+sgn")

WINDOW_KINDS = (
    "none",
    "linear",
    "parabolic",
    "mueller",
    "spiky",
    "cubic-spline",
    "quartic-spline",
    "quintic-spline",
)

MAPPING_KINDS = ("identity", "polar", "preserving")

SYMMETRY_MODES = ("standard", "symmetric", "antisymmetric")

# Radial kinds whose centroids are pulled inward by (1 - 2/n). The bump RBF
# shares the rule; spiky deliberately does not (it cannot be normalized).
_RESCALED_KINDS = frozenset(
    {"cubic-spline", "quartic-spline", "quintic-spline", "wendland2", "gaussian", "bump"}
)

# Kinds whose width/amplitude are solved numerically so the family sums to one.
_UNITY_SOLVED_KINDS = frozenset(
    {"cubic-spline", "quartic-spline", "quintic-spline", "wendland2"}
)

_ALIASES = {"nn": "nearest-neighbor", "chebyshev1": "chebyshev"}

BUMP_CONSTANT = 0.38739618954567656

_SQRT_PI = np.sqrt(np.pi)


@dataclass(frozen=True)
class BasisSpec:
    """Description of one 1D basis family with ``n`` terms."""

    kind: str
    n: int
    fourier_variant: str = "standard"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in BASIS_KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("basis term count must be >= 1")
        if self.fourier_variant not in FOURIER_VARIANTS:
            raise ValueError(f"unknown fourier variant {self.fourier_variant!r}")

    @classmethod
    def from_name(cls, name: str, n: int) -> "BasisSpec":
        """Parse a stable name such as ``"linear"`` or ``"fourier:sfbc"``."""
        if ":" in name:
            kind, variant = name.split(":", 1)
            return cls(kind=kind, n=n, fourier_variant=variant)
        return cls(kind=name, n=n)

    @property
    def name(self) -> str:
        if self.kind == "fourier" and self.fourier_variant != "standard":
            return f"fourier:{self.fourier_variant}"
        return self.kind


@dataclass(frozen=True)
class WindowSpec:
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in WINDOW_KINDS:
            raise ValueError(f"unknown window kind {self.kind!r}")


@dataclass(frozen=True)
class MappingSpec:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in MAPPING_KINDS:
            raise ValueError(f"unknown mapping kind {self.kind!r}")


def centroids(n: int) -> tuple[np.ndarray, float]:
    """Evenly spaced unit-interval centroids and their separation.

    For n == 1 the single centroid sits at 0 with separation 2 so one term
    covers the whole domain.
    """
    if n == 1:
        return np.zeros(1), 2.0
    return np.linspace(-1.0, 1.0, n), 2.0 / (n - 1)


def _pos(x):
    return np.maximum(x, 0.0)


def _shape_cubic(r):
    c = 1.732051
    q = np.abs(r) / c
    return _pos(1.0 - q) ** 3 - 4.0 * _pos(0.5 - q) ** 3


def _shape_quartic(r):
    c = 1.936492
    q = np.abs(r) / c
    return _pos(1.0 - q) ** 4 - 5.0 * _pos(0.6 - q) ** 4 + 10.0 * _pos(0.2 - q) ** 4


def _shape_quintic(r):
    c = 2.121321
    q = np.abs(r) / c
    return (
        _pos(1.0 - q) ** 5
        - 6.0 * _pos(2.0 / 3.0 - q) ** 5
        + 15.0 * _pos(1.0 / 3.0 - q) ** 5
    )


def _shape_wendland2(r):
    c = 1.620185
    q = np.abs(r) / c
    return _pos(1.0 - q) ** 4 * (1.0 + 4.0 * q)


def _shape_gaussian(r):
    return np.exp(-np.asarray(r) ** 2)


def _shape_spiky(r):
    return _pos(1.0 - np.abs(r)) ** 3


def _shape_bump(r):
    r = np.abs(np.asarray(r, dtype=float))
    scaled = BUMP_CONSTANT * r
    inside = scaled < 1.0
    denom = np.where(inside, 1.0 - scaled**2, 1.0)
    return np.where(inside, np.exp(-1.0 / denom), 0.0)


_RADIAL_SHAPES = {
    "cubic-spline": _shape_cubic,
    "quartic-spline": _shape_quartic,
    "quintic-spline": _shape_quintic,
    "wendland2": _shape_wendland2,
    "gaussian": _shape_gaussian,
    "spiky": _shape_spiky,
    "bump": _shape_bump,
}


@functools.lru_cache(maxsize=None)
def _unity_width(kind: str, n: int, tol: float = 8e-3) -> tuple[float, float]:
    """Minimal width multiplier and amplitude so that the family sums to one.

    The smooth radial shapes do not form a partition of unity at their natural
    width, so the width is stretched (and the amplitude rescaled) until the
    summed response over [-1, 1] is flat to within ``tol``. Returns
    ``(width, amplitude)`` where the basis argument is offset / (width * dx).
    """
    shape = _RADIAL_SHAPES[kind]
    cents, dx = centroids(n)
    if kind in _RESCALED_KINDS:
        cents = cents * (1.0 - 2.0 / n)
    grid = np.linspace(-1.0, 1.0, 1601)

    def deviation(width):
        args = (grid[:, None] - cents[None, :]) / (width * dx)
        total = shape(args).sum(axis=1)
        hi, lo = total.max(), total.min()
        if hi + lo == 0.0:
            return 1.0, 1.0
        return (hi - lo) / (hi + lo), 2.0 / (hi + lo)

    widths = np.geomspace(0.25, 256.0, 160)
    prev = widths[0]
    for w in widths:
        dev, amp = deviation(w)
        if dev <= tol:
            lo_w, hi_w = prev, w
            for _ in range(40):
                mid = 0.5 * (lo_w + hi_w)
                dev_mid, _ = deviation(mid)
                if dev_mid <= tol:
                    hi_w = mid
                else:
                    lo_w = mid
            _, amp = deviation(hi_w)
            return float(hi_w), float(amp)
        prev = w
    raise RuntimeError(f"no partition-of-unity width found for {kind} n={n}")


def select_fourier_terms(variant: str, n: int) -> list[tuple]:
    """Ordered term descriptors for a Fourier-family basis.

    Descriptors are ``("const",)``, ``("sin", k)``, ``("cos", k)``,
    ``("x",)`` or ``("sgn",)`` with harmonic index k >= 1.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if variant == "standard" or (variant == "sfbc" and (n < 4 or n % 2 == 1)):
        terms = [("const",)]
        for i in range(1, n):
            k = (i - 1) // 2 + 1
            terms.append(("cos", k) if i % 2 == 1 else ("sin", k))
        return terms
    if variant == "sfbc":
        # Even n >= 4: drop the first harmonic cosine in favour of the next
        # sine so the 2D tensor splits evenly into odd and even products.
        half = n // 2
        terms = [("const",)]
        terms += [("sin", k) for k in range(1, half + 1)]
        terms += [("cos", k) for k in range(2, half + 1)]
        return terms
    if variant == "even":
        return [("const",)] + [("cos", k) for k in range(1, n)]
    if variant in ("odd", "odd+x", "odd+sgn"):
        head = {"odd": ("const",), "odd+x": ("x",), "odd+sgn": ("sgn",)}[variant]
        return [head] + [("sin", k) for k in range(1, n)]
    raise ValueError(f"unknown fourier variant {variant!r}")


def _eval_fourier(terms, p):
    p = np.asarray(p, dtype=float)
    cols = []
    for term in terms:
        if term[0] == "const":
            cols.append(np.ones_like(p))
        elif term[0] == "x":
            cols.append(p)
        elif term[0] == "sgn":
            cols.append(np.sign(p))
        elif term[0] == "cos":
            cols.append(np.cos(np.pi * term[1] * p) / _SQRT_PI)
        else:
            cols.append(np.sin(np.pi * term[1] * p) / _SQRT_PI)
    return np.stack(cols, axis=-1)


def _eval_chebyshev(n, p, second_kind=False):
    p = np.asarray(p, dtype=float)
    cols = [np.ones_like(p)]
    if n > 1:
        cols.append(2.0 * p if second_kind else p)
    for _ in range(2, n):
        cols.append(2.0 * p * cols[-1] - cols[-2])
    return np.stack(cols[:n], axis=-1)


def eval_basis(spec: BasisSpec, q) -> np.ndarray:
    """Evaluate all n basis terms at q.

    q may be a scalar or an array; the result gains a trailing axis of
    length n. Inputs slightly outside [-1, 1] are evaluated as defined
    (compact kinds return zero there).
    """
    q = np.asarray(q, dtype=float)
    kind = spec.kind
    if kind == "fourier":
        return _eval_fourier(select_fourier_terms(spec.fourier_variant, spec.n), q)
    if kind == "chebyshev":
        return _eval_chebyshev(spec.n, q)
    if kind == "chebyshev2":
        return _eval_chebyshev(spec.n, q, second_kind=True)

    cents, dx = centroids(spec.n)
    if kind in _RESCALED_KINDS:
        cents = cents * (1.0 - 2.0 / spec.n)
    offsets = (q[..., None] - cents) / dx

    if kind == "nearest-neighbor":
        # Half-open interval so adjacent terms never overlap.
        return ((offsets > -0.5) & (offsets <= 0.5)).astype(float)
    if kind in ("linear", "dmcf"):
        return _pos(1.0 - np.abs(offsets))
    if kind in _UNITY_SOLVED_KINDS:
        width, amp = _unity_width(kind, spec.n)
        return amp * _RADIAL_SHAPES[kind](offsets / width)
    if kind in ("gaussian", "spiky", "bump"):
        return _RADIAL_SHAPES[kind](offsets)
    raise ValueError(f"unknown basis kind {kind!r}")


def eval_window(spec: WindowSpec, r) -> np.ndarray:
    """Radial window value; zero for r >= 1 for every kind except none."""
    r = np.asarray(r, dtype=float)
    kind = spec.kind
    if kind == "none":
        return np.where(r <= 1.0, 1.0, 0.0)
    if kind == "linear":
        return _pos(1.0 - r)
    if kind == "parabolic":
        return _pos(1.0 - r**2)
    if kind == "mueller":
        return _pos(1.0 - r**2) ** 3
    if kind == "spiky":
        return _pos(1.0 - r) ** 3
    if kind == "cubic-spline":
        return _pos(1.0 - r) ** 3 - 4.0 * _pos(0.5 - r) ** 3
    if kind == "quartic-spline":
        return _pos(1.0 - r) ** 4 - 5.0 * _pos(0.6 - r) ** 4 + 10.0 * _pos(0.2 - r) ** 4
    if kind == "quintic-spline":
        return (
            _pos(1.0 - r) ** 5
            - 6.0 * _pos(2.0 / 3.0 - r) ** 5
            + 15.0 * _pos(1.0 / 3.0 - r) ** 5
        )
    raise ValueError(f"unknown window kind {kind!r}")


def _map_polar(q: np.ndarray) -> np.ndarray:
    d = q.shape[-1]
    if d == 1:
        return q
    norm = np.linalg.norm(q, axis=-1)
    radial = 2.0 * norm - 1.0
    azimuth = np.arctan2(q[..., 1], q[..., 0]) / np.pi
    if d == 2:
        return np.stack([radial, azimuth], axis=-1)
    # 3D: polar angle rescaled from [0, pi] onto [-1, 1].
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_t = np.where(norm > 0.0, q[..., 2] / np.where(norm > 0.0, norm, 1.0), 0.0)
    polar = 2.0 * np.arccos(np.clip(cos_t, -1.0, 1.0)) / np.pi - 1.0
    polar = np.where(norm > 0.0, polar, 0.0)
    return np.stack([radial, azimuth, polar], axis=-1)


def _ball_to_cylinder(q: np.ndarray) -> np.ndarray:
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    rho = np.linalg.norm(q, axis=-1)
    rxy = np.hypot(x, y)
    zero = rho == 0.0
    safe_rxy = np.where(rxy > 0.0, rxy, 1.0)
    safe_rho = np.where(rho > 0.0, rho, 1.0)

    upper = 1.25 * z**2 <= rxy**2  # the x/y-dominated branch
    scale_u = rho / safe_rxy
    out_u = np.stack([x * scale_u, y * scale_u, 1.5 * z], axis=-1)

    scale_l = np.sqrt(3.0 * rho / (safe_rho + np.abs(z)))
    out_l = np.stack([x * scale_l, y * scale_l, np.sign(z) * rho], axis=-1)

    out = np.where(upper[..., None], out_u, out_l)
    return np.where(zero[..., None], 0.0, out)


def _cylinder_to_cube(q: np.ndarray) -> np.ndarray:
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    rxy = np.hypot(x, y)
    axis = (x == 0.0) & (y == 0.0)
    safe_x = np.where(x != 0.0, x, 1.0)
    safe_y = np.where(y != 0.0, y, 1.0)

    xdom = np.abs(y) <= np.abs(x)
    out_x = np.stack(
        [
            np.sign(x) * rxy,
            (4.0 / np.pi) * np.sign(x) * rxy * np.arctan(y / safe_x),
            z,
        ],
        axis=-1,
    )
    out_y = np.stack(
        [
            (4.0 / np.pi) * np.sign(y) * rxy * np.arctan(x / safe_y),
            np.sign(y) * rxy,
            z,
        ],
        axis=-1,
    )
    out = np.where(xdom[..., None], out_x, out_y)
    on_axis = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=-1)
    return np.where(axis[..., None], on_axis, out)


def map_coords(spec: MappingSpec, q, d: int | None = None) -> np.ndarray:
    """Map normalized displacements (unit ball in d dims) into [-1, 1]^d.

    The 2D preserving variant embeds the points at z = 0, applies the 3D
    two-stage ball->cylinder->cube map and drops the third component again.
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if d is None:
        d = q.shape[-1]
    if q.shape[-1] != d:
        raise ValueError("dimension mismatch between q and d")
    if spec.kind == "identity" or d == 1:
        return q
    if spec.kind == "polar":
        return _map_polar(q)
    if spec.kind == "preserving":
        if d == 2:
            q3 = np.concatenate([q, np.zeros(q.shape[:-1] + (1,))], axis=-1)
            return _cylinder_to_cube(_ball_to_cylinder(q3))[..., :2]
        return _cylinder_to_cube(_ball_to_cylinder(q))
    raise ValueError(f"unknown mapping kind {spec.kind!r}")


def _effective_axes_and_mode(axis_specs, mode: str):
    """DMCF is linear interpolation forced into the antisymmetric construction."""
    specs = list(axis_specs)
    if any(s.kind == "dmcf" for s in specs):
        mode = "antisymmetric"
        specs = [
            BasisSpec("linear", s.n) if s.kind == "dmcf" else s for s in specs
        ]
    return specs, mode


def basis_tensor(axis_specs, q_mapped, mode: str = "standard") -> np.ndarray:
    """Flattened separable basis tensor of prod(n_axis) terms per point.

    ``q_mapped`` has shape (..., d). Standard mode is the plain outer product
    of per-axis terms; antisymmetric rescales the first axis to 2|qx| - 1,
    flips the remaining axes by sign(qx) and multiplies by sign(qx), which
    forces g(-q) = -g(q). Symmetric omits the leading sign factor.
    """
    if mode not in SYMMETRY_MODES:
        raise ValueError(f"unknown symmetry mode {mode!r}")
    q = np.atleast_1d(np.asarray(q_mapped, dtype=float))
    scalar_point = q.ndim == 1
    if scalar_point:
        q = q[None, :]
    d = q.shape[-1]
    specs, mode = _effective_axes_and_mode(axis_specs, mode)
    if len(specs) != d:
        raise ValueError("one BasisSpec required per axis")

    sign = None
    if mode != "standard":
        sx = np.sign(q[..., 0])
        axes = [2.0 * np.abs(q[..., 0]) - 1.0]
        axes += [sx * q[..., a] for a in range(1, d)]
        if mode == "antisymmetric":
            sign = sx
    else:
        axes = [q[..., a] for a in range(d)]

    tensor = eval_basis(specs[0], axes[0])
    for a in range(1, d):
        vals = eval_basis(specs[a], axes[a])
        tensor = tensor[..., :, None] * vals[..., None, :]
        tensor = tensor.reshape(tensor.shape[:-2] + (-1,))
    if sign is not None:
        tensor = tensor * sign[..., None]
    return tensor[0] if scalar_point else tensor
