"""Fully-connected tanh networks with the derivative machinery the training
loop needs: batched forward evaluation, reverse-mode parameter gradients
(vector-Jacobian products), and forward-mode spatial derivatives up to the
Laplacian.

Parameter flattening order is part of the public contract: layer by layer,
weight matrix in row-major order followed by the bias vector. Spatial
derivatives propagate second-order Taylor data ``(value, d/dx, d/dy,
d2/dx2, d2/dy2)`` through every layer; cross derivatives are not tracked
since only gradients and Laplacians are consumed. The same propagation
rules back :class:`Taylor2`, used elsewhere to turn closed-form solutions
into machine-accurate source terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class Mlp:
    """Network parameters; architecture ``(n_0, ..., n_L)`` with n_0=2, n_L=1."""

    weights: tuple
    biases: tuple

    @property
    def arch(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def mlp_new(arch: Sequence[int], seed: int = 0) -> Mlp:
    """Glorot-uniform weights ``U(-a, a)`` with ``a = sqrt(6/(fan_in+fan_out))``,
    zero biases; deterministic for a fixed seed."""
    arch = tuple(int(n) for n in arch)
    if len(arch) < 2 or any(n < 1 for n in arch):
        raise NetError(f"invalid architecture {arch}")
    if arch[0] != 2:
        raise NetError("input dimension must be 2")
    if arch[-1] != 1:
        raise NetError("output dimension must be 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(arch[:-1], arch[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(tuple(weights), tuple(biases))


def flatten(net: Mlp) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten(net: Mlp, theta: np.ndarray) -> Mlp:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (net.n_params,):
        raise NetError("parameter vector length mismatch")
    weights, biases, pos = [], [], 0
    for w, b in zip(net.weights, net.biases):
        weights.append(theta[pos : pos + w.size].reshape(w.shape).copy())
        pos += w.size
        biases.append(theta[pos : pos + b.size].copy())
        pos += b.size
    return Mlp(tuple(weights), tuple(biases))


def _forward_cached(net: Mlp, pts: np.ndarray):
    a = np.asarray(pts, dtype=float)
    acts = [a]
    L = net.n_layers
    for k in range(L - 1):
        z = a @ net.weights[k].T + net.biases[k]
        a = np.tanh(z)
        acts.append(a)
    out = a @ net.weights[-1].T + net.biases[-1]
    return out[:, 0], acts


def forward(net: Mlp, pts: np.ndarray) -> np.ndarray:
    """Network values at a batch of points (n, 2)."""
    return _forward_cached(net, pts)[0]


def hidden_outputs(net: Mlp, pts: np.ndarray) -> np.ndarray:
    """The last-layer functions: hidden activations feeding the final
    affine map, shape ``(n, n_{L-1})``."""
    _, acts = _forward_cached(net, pts)
    return acts[-1]


def vjp(net: Mlp, pts: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """``sum_i g_i * dN(x_i)/dtheta`` by reverse accumulation; flat layout."""
    cot = np.asarray(cotangent, dtype=float)
    pts = np.asarray(pts, dtype=float)
    if cot.shape != (len(pts),):
        raise NetError("cotangent length must match the batch")
    _, acts = _forward_cached(net, pts)
    L = net.n_layers
    grads_w = [None] * L
    grads_b = [None] * L
    dz = cot[:, None]
    for k in range(L - 1, -1, -1):
        grads_w[k] = dz.T @ acts[k]
        grads_b[k] = dz.sum(axis=0)
        if k > 0:
            da = dz @ net.weights[k]
            dz = da * (1.0 - acts[k] ** 2)
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def forward_grad(net: Mlp, pts: np.ndarray):
    """Values and spatial gradients, first-order forward mode."""
    v = np.asarray(pts, dtype=float)
    n = len(v)
    d = np.zeros((n, 2, 2))
    d[:, 0, 0] = 1.0
    d[:, 1, 1] = 1.0
    L = net.n_layers
    for k in range(L):
        W = net.weights[k]
        v = v @ W.T + net.biases[k]
        d = np.einsum("ndi,oi->ndo", d, W)
        if k < L - 1:
            t = np.tanh(v)
            d = (1.0 - t**2)[:, None, :] * d
            v = t
    return v[:, 0], d[:, :, 0]


def spatial_derivs(net: Mlp, pts: np.ndarray):
    """Values, gradients and Laplacians by second-order forward mode."""
    v = np.asarray(pts, dtype=float)
    n = len(v)
    d = np.zeros((n, 2, 2))
    d[:, 0, 0] = 1.0
    d[:, 1, 1] = 1.0
    h = np.zeros((n, 2, 2))
    L = net.n_layers
    for k in range(L):
        W = net.weights[k]
        v = v @ W.T + net.biases[k]
        d = np.einsum("ndi,oi->ndo", d, W)
        h = np.einsum("ndi,oi->ndo", h, W)
        if k < L - 1:
            t = np.tanh(v)
            u = 1.0 - t**2
            h = u[:, None, :] * h - (2.0 * t * u)[:, None, :] * d**2
            d = u[:, None, :] * d
            v = t
    lap = h[:, 0, 0] + h[:, 1, 0]
    return v[:, 0], d[:, :, 0], lap


# -- checkpointing -------------------------------------------------------------

_MAGIC = b"mlp-checkpoint v1"


def save_checkpoint(net: Mlp, path) -> None:
    """Architecture plus flat parameters; loading is bitwise exact."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC + b"\n")
        fh.write((",".join(str(n) for n in net.arch)).encode() + b"\n")
        fh.write(flatten(net).astype("<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    with open(path, "rb") as fh:
        if fh.readline().strip() != _MAGIC:
            raise NetError("not a checkpoint file")
        arch = tuple(int(s) for s in fh.readline().decode().strip().split(","))
        theta = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    ref = mlp_new(arch, seed=0)
    return unflatten(ref, theta)


# -- scalar forward-mode arithmetic --------------------------------------------

class Taylor2:
    """Batched second-order Taylor values ``(val, dx, dy, dxx, dyy)``.

    Supports the arithmetic needed to differentiate closed-form solutions:
    +, -, *, /, powers, sqrt, sin, cos, tan/arctan, atan2, tanh, exp. The
    Laplacian of an expression is ``expr.dxx + expr.dyy``, machine accurate.
    """

    __slots__ = ("val", "dx", "dy", "dxx", "dyy")

    def __init__(self, val, dx=0.0, dy=0.0, dxx=0.0, dyy=0.0):
        self.val = np.asarray(val, dtype=float)
        z = np.zeros_like(self.val)
        self.dx = z + dx
        self.dy = z + dy
        self.dxx = z + dxx
        self.dyy = z + dyy

    @staticmethod
    def seed(pts: np.ndarray):
        pts = np.asarray(pts, dtype=float)
        x = Taylor2(pts[:, 0], dx=1.0)
        y = Taylor2(pts[:, 1], dy=1.0)
        return x, y

    def _lift(self, other):
        return other if isinstance(other, Taylor2) else Taylor2(np.broadcast_to(np.asarray(other, dtype=float), self.val.shape).copy())

    def __add__(self, other):
        o = self._lift(other)
        return Taylor2(self.val + o.val, self.dx + o.dx, self.dy + o.dy, self.dxx + o.dxx, self.dyy + o.dyy)

    __radd__ = __add__

    def __neg__(self):
        return Taylor2(-self.val, -self.dx, -self.dy, -self.dxx, -self.dyy)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        o = self._lift(other)
        return Taylor2(
            self.val * o.val,
            self.dx * o.val + self.val * o.dx,
            self.dy * o.val + self.val * o.dy,
            self.dxx * o.val + 2 * self.dx * o.dx + self.val * o.dxx,
            self.dyy * o.val + 2 * self.dy * o.dy + self.val * o.dyy,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        return self * o._unary(1.0 / o.val, -1.0 / o.val**2, 2.0 / o.val**3)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        # integer powers stay defined at val = 0
        if p == 0:
            return Taylor2(np.ones_like(self.val))
        if p == 1:
            return self
        if p == 2:
            return self * self
        if float(p).is_integer() and p > 2:
            return self._unary(
                self.val**p,
                p * self.val ** (p - 1),
                p * (p - 1) * self.val ** (p - 2),
            )
        # fractional powers require positive values
        return self._unary(
            self.val**p,
            p * self.val ** (p - 1),
            p * (p - 1) * self.val ** (p - 2),
        )

    def _unary(self, f, f1, f2):
        """Compose with a scalar function given f(v), f'(v), f''(v)."""
        return Taylor2(
            f,
            f1 * self.dx,
            f1 * self.dy,
            f2 * self.dx**2 + f1 * self.dxx,
            f2 * self.dy**2 + f1 * self.dyy,
        )

    def sqrt(self):
        r = np.sqrt(self.val)
        return self._unary(r, 0.5 / r, -0.25 / r**3)

    def sin(self):
        s, c = np.sin(self.val), np.cos(self.val)
        return self._unary(s, c, -s)

    def cos(self):
        s, c = np.sin(self.val), np.cos(self.val)
        return self._unary(c, -s, -c)

    def arctan(self):
        den = 1.0 + self.val**2
        return self._unary(np.arctan(self.val), 1.0 / den, -2.0 * self.val / den**2)

    def tanh(self):
        t = np.tanh(self.val)
        u = 1.0 - t**2
        return self._unary(t, u, -2.0 * t * u)

    def exp(self):
        e = np.exp(self.val)
        return self._unary(e, e, e)


def t2_atan2(y: Taylor2, x: Taylor2) -> Taylor2:
    """Four-quadrant angle of a Taylor pair; singular only at the origin."""
    a, b = y.val, x.val
    r2 = a**2 + b**2
    th = np.arctan2(a, b)
    f_a, f_b = b / r2, -a / r2
    f_aa = -2 * a * b / r2**2
    f_bb = 2 * a * b / r2**2
    f_ab = (a**2 - b**2) / r2**2
    dx = f_a * y.dx + f_b * x.dx
    dy = f_a * y.dy + f_b * x.dy
    dxx = (
        f_aa * y.dx**2 + 2 * f_ab * y.dx * x.dx + f_bb * x.dx**2
        + f_a * y.dxx + f_b * x.dxx
    )
    dyy = (
        f_aa * y.dy**2 + 2 * f_ab * y.dy * x.dy + f_bb * x.dy**2
        + f_a * y.dyy + f_b * x.dyy
    )
    out = Taylor2(th)
    out.dx, out.dy, out.dxx, out.dyy = dx, dy, dxx, dyy
    return out
