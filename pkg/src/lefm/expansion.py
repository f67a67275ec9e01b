"""Monomial feature expansion with learnable per-term coefficients.

An input pixel with d features is mapped to D = C(d+m, m) features, one per
monomial x1^q1 * ... * xd^qd with q1 + ... + qd <= m.  The expansion is the
entry-wise product of the fixed monomial vector (location dependent) and a
learnable coefficient vector (shared across locations).  This module holds
the exponent enumeration, the mask-based evaluation, and the exact analytic
gradients; the torch layer in `network` reuses the same formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError

MAX_FEATURES = 16
MAX_ORDER = 8
MAX_TERMS = 100_000

_SUPERSCRIPTS = str.maketrans("0123456789", "⁰¹²³⁴⁵⁶⁷⁸⁹")


@dataclass(frozen=True)
class ExponentTable:
    """All exponent vectors of total degree <= m over d features.

    Rows are sorted in graded lexicographic order: total degree ascending,
    then by descending leading exponents, so row 0 is the constant term and
    the ordering is stable across runs.  `term_mask` selects the bases that
    participate in each monomial and `power_mask` carries the exponents;
    raising the selected bases to `power_mask` and reducing each row by
    product evaluates the monomial vector.
    """

    d: int
    m: int
    D: int
    exponents: tuple[tuple[int, ...], ...]
    term_mask: np.ndarray = field(repr=False, compare=False)
    power_mask: np.ndarray = field(repr=False, compare=False)

    def to_dict(self) -> dict:
        """JSON-serializable form: {d, m, D, exponents}."""
        return {"d": self.d, "m": self.m, "D": self.D, "exponents": [list(q) for q in self.exponents]}

    @classmethod
    def from_dict(cls, payload: dict) -> "ExponentTable":
        table = enumerate_exponents(int(payload["d"]), int(payload["m"]))
        stored = [tuple(int(v) for v in q) for q in payload["exponents"]]
        if list(table.exponents) != stored:
            raise ConfigurationError("stored exponent ordering does not match the canonical ordering")
        return table


def _graded_exponents(d: int, m: int):
    """Yield exponent tuples in graded lexicographic order."""

    def compositions(total, parts):
        if parts == 1:
            yield (total,)
            return
        for first in range(total, -1, -1):
            for rest in compositions(total - first, parts - 1):
                yield (first,) + rest

    for degree in range(m + 1):
        yield from compositions(degree, d)


def enumerate_exponents(d: int, m: int) -> ExponentTable:
    """Build the exponent table for d input features and expansion order m.

    Raises ConfigurationError when d or m is out of bounds or the number of
    terms C(d+m, m) would exceed MAX_TERMS.
    """
    if not isinstance(d, int) or not isinstance(m, int):
        raise ConfigurationError(f"d and m must be integers, got d={d!r}, m={m!r}")
    if not 1 <= d <= MAX_FEATURES:
        raise ConfigurationError(f"d must be in [1, {MAX_FEATURES}], got {d}")
    if not 1 <= m <= MAX_ORDER:
        raise ConfigurationError(f"m must be in [1, {MAX_ORDER}], got {m}")
    n_terms = math.comb(d + m, m)
    if n_terms > MAX_TERMS:
        raise ConfigurationError(f"C({d}+{m}, {m}) = {n_terms} exceeds the {MAX_TERMS}-term limit")

    exponents = tuple(_graded_exponents(d, m))
    assert len(exponents) == n_terms
    power_mask = np.array(exponents, dtype=np.float64)
    term_mask = (power_mask > 0).astype(np.float64)
    return ExponentTable(d=d, m=m, D=n_terms, exponents=exponents, term_mask=term_mask, power_mask=power_mask)


@dataclass
class LefmLayer:
    """Expansion layer state: an exponent table plus its coefficient vector.

    The same coefficients are applied at every spatial location.  When
    `use_batch_norm` is set the layer carries one (mean, std) pair per term
    and the expanded features are normalized after the coefficient product.
    """

    table: ExponentTable
    coefficients: np.ndarray
    use_batch_norm: bool = False
    term_mean: np.ndarray | None = None
    term_std: np.ndarray | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != (self.table.D,):
            raise ConfigurationError(
                f"coefficient vector has shape {self.coefficients.shape}, expected ({self.table.D},)"
            )
        if self.use_batch_norm:
            if self.term_mean is None:
                self.term_mean = np.zeros(self.table.D)
            if self.term_std is None:
                self.term_std = np.ones(self.table.D)
            self.term_mean = np.asarray(self.term_mean, dtype=np.float64)
            self.term_std = np.asarray(self.term_std, dtype=np.float64)
            if self.term_mean.shape != (self.table.D,) or self.term_std.shape != (self.table.D,):
                raise ConfigurationError("normalization statistics must have one entry per term")

    @classmethod
    def initialize(cls, table: ExponentTable, seed: int = 0, use_batch_norm: bool = False) -> "LefmLayer":
        """Random coefficients, uniform on [-1/sqrt(D), 1/sqrt(D)]."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(table.D)
        coeff = rng.uniform(-bound, bound, size=table.D)
        return cls(table=table, coefficients=coeff, use_batch_norm=use_batch_norm)


def monomials(table: ExponentTable, x) -> np.ndarray:
    """Evaluate the monomial vector at a single feature vector x.

    Entry r is prod_i x_i^q_i for q = exponents[r]; 0^0 evaluates to 1, so
    the constant term is always 1.  Uses the mask route: bases selected by
    term_mask, raised to power_mask, reduced by row-wise product.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (table.d,):
        raise ValueError(f"expected a length-{table.d} vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input to monomial evaluation")
    bases = np.where(table.term_mask > 0, x[None, :], 1.0)
    return np.prod(bases ** table.power_mask, axis=1)


def _monomials_flat(table: ExponentTable, flat: np.ndarray) -> np.ndarray:
    """Monomial vectors for an (N, d) array of feature vectors, term by term."""
    out = np.ones((flat.shape[0], table.D), dtype=np.float64)
    for r, q in enumerate(table.exponents):
        for i, qi in enumerate(q):
            if qi == 1:
                out[:, r] *= flat[:, i]
            elif qi > 1:
                out[:, r] *= flat[:, i] ** qi
    return out


def _check_image(table: ExponentTable, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != table.d:
        raise ValueError(f"expected an H x W x {table.d} image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input image")
    return x


def lefm_forward(layer: LefmLayer, x) -> np.ndarray:
    """Expand an H x W x d image to H x W x D.

    At every pixel the monomial vector is multiplied entry-wise by the shared
    coefficient vector; per-term normalization follows when enabled.
    """
    x = _check_image(layer.table, x)
    h, w, d = x.shape
    psi = _monomials_flat(layer.table, x.reshape(-1, d))
    out = psi * layer.coefficients[None, :]
    if layer.use_batch_norm:
        out = (out - layer.term_mean[None, :]) / layer.term_std[None, :]
    return out.reshape(h, w, layer.table.D)


def lefm_backward(layer: LefmLayer, x, upstream_grad) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the expansion given upstream gradients.

    Returns (grad_coefficients, grad_x).  Coefficient gradients accumulate
    over all pixels (the vector is shared); the sum runs in fixed pixel order
    so seeded runs reduce deterministically.  Terms with q_i = 0 contribute
    nothing to grad_x_i.
    """
    x = _check_image(layer.table, x)
    h, w, d = x.shape
    table = layer.table
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (h, w, table.D):
        raise ValueError(f"expected upstream gradient of shape {(h, w, table.D)}, got {upstream.shape}")

    flat = x.reshape(-1, d)
    u = upstream.reshape(-1, table.D)
    if layer.use_batch_norm:
        u = u / layer.term_std[None, :]

    psi = _monomials_flat(table, flat)
    grad_coeff = np.sum(u * psi, axis=0)

    grad_x = np.zeros_like(flat)
    for r, q in enumerate(table.exponents):
        u_a = u[:, r] * layer.coefficients[r]
        for i, qi in enumerate(q):
            if qi == 0:
                continue
            partial = float(qi) * flat[:, i] ** (qi - 1)
            for j, qj in enumerate(q):
                if j != i and qj > 0:
                    partial = partial * flat[:, j] ** qj
            grad_x[:, i] += u_a * partial
    return grad_coeff, grad_x.reshape(h, w, d)


def label_terms(table: ExponentTable, channel_names) -> list[str]:
    """Human-readable monomial labels, e.g. (2,1,0) with names R,G,B -> R2G in superscript."""
    names = list(channel_names)
    if len(names) != table.d:
        raise ValueError(f"expected {table.d} channel names, got {len(names)}")
    labels = []
    for q in table.exponents:
        parts = []
        for name, qi in zip(names, q):
            if qi == 1:
                parts.append(name)
            elif qi > 1:
                parts.append(name + str(qi).translate(_SUPERSCRIPTS))
        labels.append("".join(parts) if parts else "1")
    return labels
