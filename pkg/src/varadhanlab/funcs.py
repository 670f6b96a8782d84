"""Registry of named scalar coefficient functions.

Diffusion and drift coefficients are picked from a closed-form registry
rather than parsed from expressions, so smoothness and boundedness checks
stay decidable and model specs remain hashable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScalarFunc:
    """A named scalar function u -> f(u) with derivative, vectorized over arrays."""

    name: str
    args: tuple[float, ...] = ()

    def __post_init__(self):
        if self.name not in _REGISTRY:
            raise ValueError(f"unknown scalar function {self.name!r}; "
                             f"known: {sorted(_REGISTRY)}")
        spec = _REGISTRY[self.name]
        if len(self.args) != spec.n_args:
            raise ValueError(f"{self.name} takes {spec.n_args} parameter(s), "
                             f"got {len(self.args)}")

    def __call__(self, u):
        return _REGISTRY[self.name].f(np.asarray(u, dtype=float), *self.args)

    def deriv(self, u):
        return _REGISTRY[self.name].df(np.asarray(u, dtype=float), *self.args)

    def label(self) -> str:
        if not self.args:
            return self.name
        return self.name + ":" + ",".join(repr(a) for a in self.args)


@dataclass(frozen=True)
class _Entry:
    f: callable
    df: callable
    n_args: int


def _affine_clamped(u, a, b, lo, hi):
    return np.clip(a + b * u, lo, hi)


def _affine_clamped_d(u, a, b, lo, hi):
    v = a + b * u
    return np.where((v > lo) & (v < hi), b, 0.0)


_REGISTRY = {
    "zero": _Entry(lambda u: np.zeros_like(u), lambda u: np.zeros_like(u), 0),
    "const": _Entry(lambda u, c: np.full_like(u, c), lambda u, c: np.zeros_like(u), 1),
    "affine": _Entry(lambda u, a, b: a + b * u, lambda u, a, b: np.full_like(u, b), 2),
    "affine_clamped": _Entry(_affine_clamped, _affine_clamped_d, 4),
    "cos_perturbed": _Entry(lambda u, c, a: c + a * np.cos(u),
                            lambda u, c, a: -a * np.sin(u), 2),
    "tanh_bounded": _Entry(lambda u, a: a * np.tanh(u),
                           lambda u, a: a / np.cosh(u) ** 2, 1),
}

ZERO = ScalarFunc("zero")
ONE = ScalarFunc("const", (1.0,))
# Smooth bounded-below diffusion and bounded drift used as the default
# nonlinear test model: sigma = 1 + 0.25 cos(u) >= 0.75, b = 0.5 tanh(u).
SIGMA_DEFAULT = ScalarFunc("cos_perturbed", (1.0, 0.25))
B_DEFAULT = ScalarFunc("tanh_bounded", (0.5,))


def make_func(name: str, *args: float) -> ScalarFunc:
    return ScalarFunc(name, tuple(float(a) for a in args))


def parse_func(text: str) -> ScalarFunc:
    """Parse ``"name"`` or ``"name:1.0,2.0"`` into a ScalarFunc."""
    text = text.strip()
    if ":" in text:
        name, _, rest = text.partition(":")
        args = tuple(float(tok) for tok in rest.split(",") if tok.strip())
    else:
        name, args = text, ()
    return ScalarFunc(name.strip(), args)


def sup_abs(fn: ScalarFunc, lo: float = -50.0, hi: float = 50.0, n: int = 4001) -> float:
    """Sampled sup of |fn| over a wide test range."""
    u = np.linspace(lo, hi, n)
    return float(np.max(np.abs(fn(u))))


def looks_bounded(fn: ScalarFunc, rtol: float = 1e-2) -> bool:
    """Heuristic boundedness check: the sampled sup stops growing with the range."""
    near = sup_abs(fn, -100.0, 100.0)
    far = sup_abs(fn, -1e4, 1e4)
    if far == 0.0:
        return True
    return far <= near * (1.0 + rtol)
