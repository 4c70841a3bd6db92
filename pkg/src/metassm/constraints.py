"""Constraint operators applied to decoder outputs.

Two flavours: a conic layer whose outputs are nonnegative combinations of
the rays of a polyhedral cone ``{x : G x <= 0}``, and a curl-free output
path whose field is the gradient of a learned scalar potential.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .layers import LayerSpec

CONIC_FC = "conic.fc"


@dataclass(frozen=True)
class RayReport:
    ok: bool
    worst_column: int
    worst_value: float
    violations: tuple

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return f"rays ok (max G.R entry {self.worst_value:.3e})"
        return (f"{len(self.violations)} ray column(s) leave the cone; worst is column "
                f"{self.worst_column} with G.R = {self.worst_value:.3e}")


def validate_rays(G, R, tol: float = 1e-9) -> RayReport:
    """Check every column ``R[:, j]`` satisfies ``G R[:, j] <= tol``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if G.shape[1] != R.shape[0]:
        raise ValueError(f"G has {G.shape[1]} columns but R has {R.shape[0]} rows")
    col_max = (G @ R).max(axis=0)
    worst = int(np.argmax(col_max))
    bad = tuple(int(j) for j in np.flatnonzero(col_max > tol))
    return RayReport(not bad, worst, float(col_max[worst]), bad)


class ConicConstraint:
    """Cone ``G x <= 0`` described by its rays ``R`` (``n_x x r``).

    The trainable part is the ``conic.fc`` layer mapping the decoded vector
    to ``r`` ray coefficients.
    """

    def __init__(self, G, R, tol: float = 1e-9):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        if self.R.shape[1] < 1:
            raise ValueError("ray matrix needs at least one column")
        report = validate_rays(self.G, self.R, tol)
        if not report.ok:
            raise ValueError(f"inconsistent cone: {report}")

    @property
    def n_x(self):
        return self.R.shape[0]

    @property
    def n_rays(self):
        return self.R.shape[1]

    def fc_spec(self, in_dim: int) -> LayerSpec:
        return LayerSpec(in_dim, self.n_rays, "identity")

    def scaled(self, scale) -> "ConicConstraint":
        """The same cone seen in coordinates ``x / scale``."""
        s = np.asarray(scale, dtype=float)
        return ConicConstraint(self.G * s[None, :], self.R / s[:, None])

    def to_dict(self):
        return {"G": self.G.tolist(), "R": self.R.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["G"], d["R"])

    def __repr__(self):
        return f"ConicConstraint(n_x={self.n_x}, rays={self.n_rays}, rows={self.G.shape[0]})"


def conic_apply(c: ConicConstraint, decoded, fc):
    """``R relu(fc(decoded))`` for ``decoded`` of shape ``(d,)`` or ``(N, d)``.

    ``fc`` is the ``(W, b)`` pair of the ``conic.fc`` layer.
    """
    W, b = fc
    if np.shape(ad.value_of(decoded))[-1] != np.shape(ad.value_of(W))[1]:
        raise ad.ShapeError(f"conic layer expects {np.shape(ad.value_of(W))[1]} decoded features, "
                            f"got {np.shape(ad.value_of(decoded))[-1]}")
    if np.shape(ad.value_of(W))[0] != c.n_rays:
        raise ad.ShapeError(f"conic fc produces {np.shape(ad.value_of(W))[0]} coefficients for {c.n_rays} rays")
    mu = ad.relu(ad.linear(decoded, W, b))
    return ad.matmul(mu, c.R.T)


@dataclass(frozen=True)
class CurlFreeOutput:
    """Output field ``grad phi`` taken over the coordinate entries of ``x``."""

    coords: tuple = (0, 1)

    def check(self, n_x: int):
        if len(self.coords) < 1 or len(set(self.coords)) != len(self.coords):
            raise ValueError(f"bad coordinate index set {self.coords}")
        if min(self.coords) < 0 or max(self.coords) >= n_x:
            raise ValueError(f"coordinate indices {self.coords} out of range for a {n_x}-dim state")

    def to_dict(self):
        return {"coords": list(self.coords)}


def tape_of(*objs):
    """First tape found among tensors in ``objs`` (nested lists/tuples allowed)."""
    stack = list(objs)
    while stack:
        o = stack.pop(0)
        if isinstance(o, ad.Tensor):
            return o.tape
        if isinstance(o, (list, tuple)):
            stack[:0] = list(o)
        elif hasattr(o, "tensors"):
            stack[:0] = o.tensors()
    return None


def curlfree_eval(cf: CurlFreeOutput, potential: Callable, x, tape: ad.Tape | None = None):
    """Field ``d phi / d x[coords]`` for a batch of states.

    Parameters
    ----------
    cf : CurlFreeOutput
    potential : callable
        Maps ``x`` (``(N, n_x)`` or ``(n_x,)``) to the potential, one value
        per sample. Must be built from twice differentiable primitives.
    x : array or Tensor
    tape : Tape, optional
        Tape of the weights used by ``potential``; a raw ``x`` is placed on
        it so the returned field stays differentiable in the weights.

    Returns
    -------
    Tensor of shape ``x.shape[:-1] + (len(coords),)``; a plain array when
    neither ``x`` nor ``tape`` ties the result to an existing tape.
    """
    cf.check(np.shape(ad.value_of(x))[-1])
    detached = tape is None and not isinstance(x, ad.Tensor)
    if isinstance(x, ad.Tensor):
        tape, xv = x.tape, x
    else:
        tape = ad.Tape() if tape is None else tape
        xv = tape.variable(x, name="x")
    phi = ad.sum(potential(xv))
    if not isinstance(phi, ad.Tensor):
        return np.zeros(np.shape(ad.value_of(x))[:-1] + (len(cf.coords),))
    g = tape.vjp(phi, np.ones(()), xv, create_graph=True, strict=True)
    idx = list(cf.coords)
    if isinstance(g, ad.Tensor):
        field = ad.getitem(g, (Ellipsis, idx))
        # nothing outside this call can see the private tape
        return field.value if detached else field
    return np.zeros(np.shape(ad.value_of(x))[:-1] + (len(idx),))


def discrete_curl(field: Callable, p, h: float = 1e-5):
    """Central-difference ``d f_X / d p_Y - d f_Y / d p_X`` at 2-D points ``p`` (``(N, 2)``)."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    dfx_dy = (field(p + ey)[:, 0] - field(p - ey)[:, 0]) / (2 * h)
    dfy_dx = (field(p + ex)[:, 1] - field(p - ex)[:, 1]) / (2 * h)
    return dfx_dy - dfy_dx


def rotated_cone(angle: float, rotation: float = 0.0):
    """2-D cone spanned by ``(1, 0)`` and ``(cos a, sin a)`` rotated by ``rotation``.

    Returns ``(G, R)`` with the rows of ``G`` the outward edge normals.
    """
    if not 0.0 < angle < np.pi:
        raise ValueError("cone angle must lie in (0, pi)")
    rot = np.array([[np.cos(rotation), -np.sin(rotation)], [np.sin(rotation), np.cos(rotation)]])
    R = rot @ np.array([[1.0, np.cos(angle)], [0.0, np.sin(angle)]])
    # outward normals of the two edges
    n1 = rot @ np.array([0.0, -1.0])
    n2 = rot @ np.array([-np.sin(angle), np.cos(angle)])
    return np.vstack([n1, n2]), R


def stack_rays(rays: Sequence) -> np.ndarray:
    return np.column_stack([np.asarray(r, dtype=float) for r in rays])
