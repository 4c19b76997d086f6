"""Separable basis-function continuous convolutions for particle data."""

from sfbc.bases import (
    BasisSpec,
    MappingSpec,
    WindowSpec,
    basis_tensor,
    eval_basis,
    eval_window,
    map_coords,
    select_fourier_terms,
)

__all__ = [
    "BasisSpec",
    "MappingSpec",
    "WindowSpec",
    "basis_tensor",
    "eval_basis",
    "eval_window",
    "map_coords",
    "select_fourier_terms",
]

__version__ = "0.1.0"
