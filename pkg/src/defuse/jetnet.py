"""Fully connected networks carrying value, gradient and Hessian in x.

The forward pass propagates the second-order jet of every hidden unit with
respect to the spatial input, so the PDE residual can be formed exactly.
The reverse pass differentiates that whole jet computation with respect to
the weights and biases.

Derivative slots are stored as ``(n, d + d*d, width)``: the first ``d``
slots hold the gradient, the remaining ``d*d`` the row-major Hessian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NonFiniteOutput, ShapeMismatch

ACTIVATIONS = ("elu", "relu")
_MAGIC = b"DFNP"
_VERSION = 1


def elu_jet(x):
    """ELU value and first two derivatives; the kink uses the left limit."""
    x = np.asarray(x, dtype=float)
    e = np.exp(np.minimum(x, 0.0))
    pos = x > 0
    return np.where(pos, x, np.expm1(np.minimum(x, 0.0))), np.where(pos, 1.0, e), np.where(pos, 0.0, e)


def _activation(name, z):
    """Value and derivatives 1..3 of the activation at ``z``."""
    if name == "elu":
        v, d1, d2 = elu_jet(z)
        return v, d1, d2, d2
    if name == "relu":
        pos = z > 0
        zero = np.zeros_like(z)
        return np.where(pos, z, 0.0), pos.astype(float), zero, zero
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class NetworkParams:
    weights: list
    biases: list
    activation: str = "elu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix")
        for k, (A, b) in enumerate(zip(self.weights, self.biases)):
            if A.ndim != 2 or b.shape != (A.shape[0],):
                raise ShapeMismatch(f"layer {k}: weight {A.shape} vs bias {b.shape}")
            if k and A.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeMismatch(f"layer {k} input width does not match layer {k - 1}")
        if self.weights[-1].shape[0] != 1:
            raise ShapeMismatch("output layer must be scalar")

    @classmethod
    def init(cls, widths, rng, activation="elu") -> "NetworkParams":
        """Fan-based uniform weights and zero biases.

        ``widths`` lists input dim, hidden widths and the output width 1.
        """
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[1]] + [A.shape[0] for A in self.weights]

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def size(self) -> int:
        return sum(A.size + b.size for A, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for A, b in zip(self.weights, self.biases):
            parts.append(A.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, theta) -> "NetworkParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ShapeMismatch(f"flat vector has shape {theta.shape}, expected ({self.size},)")
        weights, biases, pos = [], [], 0
        for A, b in zip(self.weights, self.biases):
            weights.append(theta[pos:pos + A.size].reshape(A.shape).copy())
            pos += A.size
            biases.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return NetworkParams(weights, biases, self.activation)

    def scaled_output(self, c: float) -> "NetworkParams":
        weights = [A.copy() for A in self.weights]
        biases = [b.copy() for b in self.biases]
        weights[-1] *= c
        biases[-1] *= c
        return NetworkParams(weights, biases, self.activation)


@dataclass
class Jet:
    """Value, gradient and Hessian; batched along the leading axis."""

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def __getitem__(self, k) -> "Jet":
        return Jet(self.value[k], self.grad[k], self.hess[k])

    @property
    def laplacian(self) -> np.ndarray:
        return np.trace(self.hess, axis1=-2, axis2=-1)


@dataclass
class Tape:
    """Intermediates of one batched jet forward pass."""

    n: int
    dim: int
    inputs: list = field(default_factory=list)  # (value, slots) entering each affine layer
    pre: list = field(default_factory=list)  # (grad, hess, s1, s2, s3) of each hidden layer


def _as_batch(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != params.dim:
        raise ShapeMismatch(f"points have dimension {x.shape[-1]}, network expects {params.dim}")
    return x, single


def forward(params: NetworkParams, x) -> np.ndarray:
    """Plain forward pass (value only)."""
    x, single = _as_batch(params, x)
    a = x
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        a = _activation(params.activation, a @ A.T + b)[0]
    out = (a @ params.weights[-1].T + params.biases[-1])[:, 0]
    return out[0] if single else out


def forward_jet(params: NetworkParams, x, record: bool = False):
    """Exact value, spatial gradient and Hessian of the network output.

    Returns a :class:`Jet`; with ``record=True`` also the :class:`Tape`
    needed by :func:`param_gradient`.
    """
    x, single = _as_batch(params, x)
    n, d = x.shape
    tape = Tape(n, d)
    val = x
    slots = np.zeros((n, d + d * d, d))
    slots[:, np.arange(d), np.arange(d)] = 1.0
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        if record:
            tape.inputs.append((val, slots))
        z = val @ A.T + b
        zs = slots @ A.T
        J = zs[:, :d, :]
        H = zs[:, d:, :].reshape(n, d, d, -1)
        v, s1, s2, s3 = _activation(params.activation, z)
        Jn = s1[:, None, :] * J
        Hn = s2[:, None, None, :] * J[:, :, None, :] * J[:, None, :, :] + s1[:, None, None, :] * H
        if record:
            tape.pre.append((J, H, s1, s2, s3))
        val = v
        slots = np.concatenate([Jn, Hn.reshape(n, d * d, -1)], axis=1)
    if record:
        tape.inputs.append((val, slots))
    A, b = params.weights[-1], params.biases[-1]
    value = (val @ A.T + b)[:, 0]
    out = (slots @ A.T)[:, :, 0]
    grad = out[:, :d]
    hess = out[:, d:].reshape(n, d, d)
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    if not (np.all(np.isfinite(value)) and np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise NonFiniteOutput("network jet contains NaN or Inf")
    jet = Jet(value, grad, hess)
    if single:
        jet = jet[0]
    if record:
        return jet, tape
    return jet


def param_gradient(params: NetworkParams, tape: Tape, value_bar, grad_bar=None, hess_bar=None) -> np.ndarray:
    """Pull per-sample jet cotangents back to the flat parameter vector.

    ``value_bar`` is ``(n,)``, ``grad_bar`` ``(n, d)`` and ``hess_bar``
    ``(n, d, d)``; missing cotangents are zero.
    """
    n, d = tape.n, tape.dim
    value_bar = np.asarray(value_bar, dtype=float)
    grad_bar = np.zeros((n, d)) if grad_bar is None else np.asarray(grad_bar, dtype=float)
    hess_bar = np.zeros((n, d, d)) if hess_bar is None else np.asarray(hess_bar, dtype=float)
    if value_bar.shape != (n,) or grad_bar.shape != (n, d) or hess_bar.shape != (n, d, d):
        raise ShapeMismatch(
            f"cotangents {value_bar.shape}, {grad_bar.shape}, {hess_bar.shape} "
            f"do not match a recorded pass of {n} points in {d}D"
        )
    if len(tape.inputs) != len(params.weights):
        raise ShapeMismatch("tape was recorded for a different architecture")
    hess_bar = 0.5 * (hess_bar + np.swapaxes(hess_bar, -1, -2))
    zbar = value_bar[:, None]
    zsbar = np.concatenate([grad_bar, hess_bar.reshape(n, d * d)], axis=1)[:, :, None]
    grads = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        A = params.weights[k]
        aval, aslots = tape.inputs[k]
        K = aslots.shape[1]
        gA = zbar.T @ aval + zsbar.reshape(n * K, -1).T @ aslots.reshape(n * K, -1)
        grads[k] = (gA, zbar.sum(axis=0))
        if k == 0:
            break
        abar = zbar @ A
        asbar = zsbar @ A
        J, H, s1, s2, s3 = tape.pre[k - 1]
        Jbar = asbar[:, :d, :]
        Hbar = asbar[:, d:, :].reshape(n, d, d, -1)
        JJ = J[:, :, None, :] * J[:, None, :, :]
        zbar = (
            s1 * abar
            + s2 * np.sum(Jbar * J, axis=1)
            + s3 * np.sum(Hbar * JJ, axis=(1, 2))
            + s2 * np.sum(Hbar * H, axis=(1, 2))
        )
        Hsym = Hbar + np.swapaxes(Hbar, 1, 2)
        Jzbar = s1[:, None, :] * Jbar + s2[:, None, :] * np.einsum("npqw,nqw->npw", Hsym, J)
        Hzbar = s1[:, None, None, :] * Hbar
        zsbar = np.concatenate([Jzbar, Hzbar.reshape(n, d * d, -1)], axis=1)
    flat = []
    for gA, gb in grads:
        flat.append(gA.ravel())
        flat.append(gb)
    return np.concatenate(flat)


def distance_jet(x, x0, normal=None):
    """Jet of ``|x - x0|`` with ``x0`` held fixed.

    Where ``x`` coincides with ``x0`` the gradient is replaced by ``normal``
    (already oriented towards the evaluation side) and the Hessian by zero.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    diff = x - x0
    dist = np.linalg.norm(diff, axis=-1)
    n, d = x.shape
    grad = np.zeros((n, d))
    hess = np.zeros((n, d, d))
    away = dist > 1e-14
    grad[away] = diff[away] / dist[away, None]
    if normal is not None:
        normal = np.broadcast_to(np.atleast_2d(normal), (n, d))
        grad[~away] = normal[~away]
    if d > 1 and away.any():
        u = grad[away]
        hess[away] = (np.eye(d)[None] - u[:, :, None] * u[:, None, :]) / dist[away, None, None]
    return dist, grad, hess


def anchor(net: Jet, dist, dgrad, dhess, g_hat) -> Jet:
    """Jet of ``(dist + 1) * g_hat + dist * net`` with ``g_hat`` constant."""
    g_hat = np.asarray(g_hat, dtype=float)
    s = g_hat + net.value
    value = (dist + 1.0) * g_hat + dist * net.value
    grad = dgrad * s[:, None] + dist[:, None] * net.grad
    outer = dgrad[:, :, None] * net.grad[:, None, :]
    hess = dhess * s[:, None, None] + outer + np.swapaxes(outer, 1, 2) + dist[:, None, None] * net.hess
    return Jet(value, grad, hess)


def anchor_cotangent(dist, dgrad, dhess, value_bar, grad_bar, hess_bar):
    """Transpose of :func:`anchor` with respect to the network jet."""
    hsym = hess_bar + np.swapaxes(hess_bar, 1, 2)
    vbar = dist * value_bar + np.sum(grad_bar * dgrad, axis=1) + np.sum(hess_bar * dhess, axis=(1, 2))
    gbar = dist[:, None] * grad_bar + np.einsum("npq,nq->np", hsym, dgrad)
    hbar = dist[:, None, None] * hess_bar
    return vbar, gbar, hbar


def anchored_jet(params: NetworkParams, x, x0, g_hat_at_x0, normal=None) -> Jet:
    """Jet of the boundary-anchored ansatz around the foot point ``x0``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    net = forward_jet(params, xb)
    dist, dgrad, dhess = distance_jet(xb, x0, normal)
    jet = anchor(net, dist, dgrad, dhess, np.broadcast_to(np.asarray(g_hat_at_x0, dtype=float), dist.shape))
    return jet[0] if single else jet


@dataclass
class PairedNet:
    """Networks for the two sides of the interface.

    With ``shared`` the same parameters (and the anchored ansatz) represent
    the solution on both sides, which is only valid when ``[u] = 0``.
    """

    minus: NetworkParams
    plus: NetworkParams
    shared: bool = False

    def __post_init__(self):
        if self.shared and self.minus is not self.plus:
            raise ValueError("a shared pair must alias one parameter set")

    @classmethod
    def init(cls, widths, rng, shared=False, activation="elu") -> "PairedNet":
        if shared:
            net = NetworkParams.init(widths, rng, activation)
            return cls(net, net, True)
        minus = NetworkParams.init(widths, rng, activation)
        plus = NetworkParams.init(widths, rng, activation)
        return cls(minus, plus, False)

    @property
    def size(self) -> int:
        return self.plus.size if self.shared else self.minus.size + self.plus.size

    def flatten(self) -> np.ndarray:
        if self.shared:
            return self.plus.flatten()
        return np.concatenate([self.minus.flatten(), self.plus.flatten()])

    def with_flat(self, theta) -> "PairedNet":
        if self.shared:
            net = self.plus.with_flat(theta)
            return PairedNet(net, net, True)
        m = self.minus.size
        return PairedNet(self.minus.with_flat(theta[:m]), self.plus.with_flat(theta[m:]), False)

    def side(self, side: str) -> NetworkParams:
        return self.minus if side == "minus" else self.plus


def save_params(path, params: NetworkParams) -> None:
    """Write the little-endian binary format (header, then flat theta)."""
    widths = params.widths
    header = struct.pack(
        f"<4sIII{len(widths)}IIQ",
        _MAGIC,
        _VERSION,
        params.dim,
        len(params.weights),
        *widths,
        ACTIVATIONS.index(params.activation),
        params.size,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.flatten().astype("<f8").tobytes())


def load_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, _dim, n_layers = struct.unpack_from("<4sIII", data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{path}: not a defuse parameter file")
    off = struct.calcsize("<4sIII")
    widths = list(struct.unpack_from(f"<{n_layers + 1}I", data, off))
    off += 4 * (n_layers + 1)
    act, count = struct.unpack_from("<IQ", data, off)
    off += struct.calcsize("<IQ")
    theta = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
    template = NetworkParams(
        [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
        [np.zeros(o) for o in widths[1:]],
        ACTIVATIONS[act],
    )
    return template.with_flat(theta)


def default_widths(dim: int) -> list:
    """4x6 hidden layers in 1D, 6x15 in 2D."""
    if dim == 1:
        return [1, 6, 6, 6, 6, 1]
    return [2] + [15] * 6 + [1]


def fd_jet(fn, x, step: float = 1e-4) -> Optional[Jet]:
    """Central-difference gradient and Hessian of a scalar batch function.

    Independent of the jet machinery; used as a test oracle.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    f0 = fn(x)
    grad = np.zeros((n, d))
    hess = np.zeros((n, d, d))
    eye = np.eye(d) * step
    for p in range(d):
        fp, fm = fn(x + eye[p]), fn(x - eye[p])
        grad[:, p] = (fp - fm) / (2 * step)
        hess[:, p, p] = (fp - 2 * f0 + fm) / step**2
        for q in range(p + 1, d):
            fpp = fn(x + eye[p] + eye[q])
            fpm = fn(x + eye[p] - eye[q])
            fmp = fn(x - eye[p] + eye[q])
            fmm = fn(x - eye[p] - eye[q])
            hess[:, p, q] = hess[:, q, p] = (fpp - fpm - fmp + fmm) / (4 * step**2)
    return Jet(f0, grad, hess)
