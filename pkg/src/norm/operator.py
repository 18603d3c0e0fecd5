"""The spectral neural operator: architecture, forward pass, exact gradients.

A model is the composition ``Q . L_n . ... . L_1 . P``:

* ``P`` lifts input channels to the hidden width pointwise (affine, or one
  hidden layer);
* each L-layer computes ``sigma(V W + b + N(V))`` where the spectral branch
  ``N`` encodes the hidden field into a truncated basis, mixes channels per
  mode with a third-order tensor ``R`` (``mix[k, l] = sum_j R[k, l, j] *
  c[k, j]``, diagonal in the mode index), and decodes back to nodes;
* ``Q`` projects pointwise to the output channels.

Three wirings are supported. ``same`` keeps one basis throughout. ``cross``
swaps the decode basis at one designated layer, moving the field between
domains (the skip ``W, b`` then acts pointwise after decoding, since the two
domains share no nodes). ``temporal`` consumes a time-signal input through
Fourier-basis layers, lifts it onto a spatial mesh at one layer (temporal
mode k pairs with spatial mode k), and finishes with layers that mix the
spatiotemporal field spatially and temporally in sequence.

Gradients are hand-derived reverse mode: every forward primitive below has
its matching vector-Jacobian product in ``backward``, so parameter
gradients are exact up to floating point (see ``training.gradcheck``).

Spatiotemporal fields are flattened spatial-major: row t * n_y + y.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import DimensionMismatch, DomainMismatch, InvalidSpec, ParseError
from .spectral import Field, SpectralBasis, load_basis, save_basis

__all__ = [
    "ACTIVATIONS",
    "PointwiseMap",
    "LLayerParams",
    "ModelSpec",
    "NormModel",
    "build_model",
    "spectral_block",
    "l_layer_forward",
    "forward",
    "backward",
    "param_count",
    "rebind",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"NORMCK1\x00"
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

ACTIVATIONS = ("gelu", "relu", "identity")


def _gelu_cdf(x: np.ndarray) -> np.ndarray:
    """The Gaussian CDF factor of GELU: Phi(x), evaluated in one vector pass."""
    return ndtr(x)


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return x * _gelu_cdf(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_with_cdf(name: str, x: np.ndarray):
    """Activation plus the factor its derivative reuses (None for identity).

    Caching the GELU CDF in the forward pass keeps the CDF evaluation out of
    the backward pass entirely; the derivative then needs only one exp.
    """
    if name == "gelu":
        cdf = _gelu_cdf(x)
        return x * cdf, cdf
    if name == "relu":
        return np.maximum(x, 0.0), None
    return x, None


def _act_grad(name: str, x: np.ndarray, cdf=None) -> np.ndarray:
    if name == "gelu":
        if cdf is None:
            cdf = _gelu_cdf(x)
        pdf = x * x
        pdf *= -0.5
        pdf = np.exp(pdf, out=pdf)
        pdf *= x
        pdf *= _INV_SQRT2PI
        pdf += cdf
        return pdf
    if name == "relu":
        return (x > 0.0).astype(np.float64)
    return np.ones_like(x)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PointwiseMap:
    """Affine map or one-hidden-layer MLP applied independently at each node."""

    w1: np.ndarray
    b1: np.ndarray
    w2: Optional[np.ndarray] = None
    b2: Optional[np.ndarray] = None
    activation: str = "gelu"

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.b1.shape[0] if self.w2 is None else self.b2.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = x @ self.w1 + self.b1
        if self.w2 is None:
            return h
        return _act(self.activation, h) @ self.w2 + self.b2


@dataclass(eq=False)
class LLayerParams:
    """One L-layer: skip weights, bias, per-mode mixing tensor(s), bases.

    ``kind`` is one of:

    * ``"same"``      -- basis_in is basis_out; skip path on the same nodes
    * ``"cross"``     -- decode into basis_out's domain; skip applied after
    * ``"lift"``      -- temporal input to spatiotemporal output
    * ``"tensor"``    -- spatiotemporal field; spatial mix (R) then temporal
                         mix (R_t) in sequence
    """

    kind: str
    W: np.ndarray
    b: np.ndarray
    R: np.ndarray
    basis_in: SpectralBasis
    basis_out: SpectralBasis
    activation: str = "gelu"
    R_t: Optional[np.ndarray] = None
    basis_time: Optional[SpectralBasis] = None


@dataclass(eq=False)
class ModelSpec:
    """Architecture description consumed by :func:`build_model`.

    ``wiring`` is "same", "cross" or "temporal". For "same", ``basis_out``
    may be omitted. For "cross", both bases are required with equal mode
    counts; ``cross_position`` (default: middle) picks the layer that moves
    domains. For "temporal", ``basis_time`` is the Fourier basis of the input
    signal and ``basis_out`` the spatial basis of the output manifold;
    ``cross_position`` picks the lifting layer.
    """

    wiring: str
    d_a: int
    d_v: int
    d_u: int
    n_layers: int
    basis_in: Optional[SpectralBasis] = None
    basis_out: Optional[SpectralBasis] = None
    basis_time: Optional[SpectralBasis] = None
    activation: str = "gelu"
    cross_position: Optional[int] = None
    p_hidden: Optional[int] = None
    q_hidden: Optional[int] = 128
    seed: int = 0


@dataclass(eq=False)
class NormModel:
    """Built model: pointwise lift, L-layers, pointwise projection."""

    p: PointwiseMap
    layers: list[LLayerParams]
    q: PointwiseMap
    wiring: str
    input_domain_id: Optional[str] = None
    output_domain_id: Optional[str] = None
    spec: Optional[ModelSpec] = None
    normalizer: Optional[object] = None  # set by training.train

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in fixed declaration order."""
        out = [("p.w1", self.p.w1), ("p.b1", self.p.b1)]
        if self.p.w2 is not None:
            out += [("p.w2", self.p.w2), ("p.b2", self.p.b2)]
        for i, lay in enumerate(self.layers):
            out += [
                (f"layers.{i}.W", lay.W),
                (f"layers.{i}.b", lay.b),
                (f"layers.{i}.R", lay.R),
            ]
            if lay.R_t is not None:
                out.append((f"layers.{i}.R_t", lay.R_t))
        out += [("q.w1", self.q.w1), ("q.b1", self.q.b1)]
        if self.q.w2 is not None:
            out += [("q.w2", self.q.w2), ("q.b2", self.q.b2)]
        return out

    def param_count(self) -> int:
        """Total scalar parameter count.

        Depends only on channel and mode counts, never on node counts, so
        it is invariant under re-discretisation of the domains.
        """
        return int(sum(arr.size for _, arr in self.parameters()))

    def rebind(self, basis_in, basis_out=None) -> "NormModel":
        """See :func:`rebind`."""
        return rebind(self, basis_in, basis_out)


def param_count(model: NormModel) -> int:
    """Total scalar parameter count of ``model``."""
    return model.param_count()


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_pointwise(rng, d_in, d_out, hidden, activation):
    if hidden is None:
        return PointwiseMap(
            w1=_uniform(rng, d_in, (d_in, d_out)),
            b1=np.zeros(d_out),
            activation=activation,
        )
    return PointwiseMap(
        w1=_uniform(rng, d_in, (d_in, hidden)),
        b1=np.zeros(hidden),
        w2=_uniform(rng, hidden, (hidden, d_out)),
        b2=np.zeros(d_out),
        activation=activation,
    )


def _same_basis(a: SpectralBasis, b: SpectralBasis) -> bool:
    return a is b or (a.source_id == b.source_id and a.d_m == b.d_m
                      and a.kind == b.kind)


def build_model(spec: ModelSpec) -> NormModel:
    """Construct and initialize a model from its description.

    Weight matrices draw from uniform(+-1/sqrt(fan_in)), biases start at
    zero, and mixing tensors draw from a normal with standard deviation
    1/(d_v * sqrt(d_m)). The final L-layer's activation is the identity.
    All draws come from one seeded generator in declaration order, so equal
    specs build bitwise-equal models.
    """
    if spec.wiring not in ("same", "cross", "temporal"):
        raise InvalidSpec(f"unknown wiring {spec.wiring!r}")
    if min(spec.d_a, spec.d_v, spec.d_u) < 1 or spec.n_layers < 1:
        raise InvalidSpec("channel counts and layer count must be positive")
    if spec.activation not in ACTIVATIONS:
        raise InvalidSpec(f"unknown activation {spec.activation!r}")

    rng = np.random.default_rng(spec.seed)
    pos = spec.cross_position if spec.cross_position is not None else spec.n_layers // 2
    if spec.wiring != "same" and not 0 <= pos < spec.n_layers:
        raise InvalidSpec(
            f"cross_position {pos} outside [0, {spec.n_layers})"
        )

    def act_for(i):
        return "identity" if i == spec.n_layers - 1 else spec.activation

    def make_layer(i, kind, b_in, b_out, d_mix, b_time=None, d_t=None):
        lay = LLayerParams(
            kind=kind,
            W=_uniform(rng, spec.d_v, (spec.d_v, spec.d_v)),
            b=np.zeros(spec.d_v),
            R=rng.normal(0.0, 1.0 / (spec.d_v * np.sqrt(d_mix)),
                         size=(d_mix, spec.d_v, spec.d_v)),
            basis_in=b_in,
            basis_out=b_out,
            activation=act_for(i),
            basis_time=b_time,
        )
        if d_t is not None:
            lay.R_t = rng.normal(0.0, 1.0 / (spec.d_v * np.sqrt(d_t)),
                                 size=(d_t, spec.d_v, spec.d_v))
        return lay

    layers = []
    if spec.wiring == "same":
        if spec.basis_in is None:
            raise InvalidSpec("same wiring needs basis_in")
        b = spec.basis_in
        if spec.basis_out is not None and not _same_basis(b, spec.basis_out):
            raise InvalidSpec("same wiring requires basis_in == basis_out")
        for i in range(spec.n_layers):
            layers.append(make_layer(i, "same", b, b, b.d_m))
        in_id, out_id = b.source_id, b.source_id

    elif spec.wiring == "cross":
        if spec.basis_in is None or spec.basis_out is None:
            raise InvalidSpec("cross wiring needs basis_in and basis_out")
        if spec.basis_in.d_m != spec.basis_out.d_m:
            raise InvalidSpec(
                "cross wiring pairs mode i with mode i, so mode counts must "
                f"match ({spec.basis_in.d_m} != {spec.basis_out.d_m})"
            )
        for i in range(spec.n_layers):
            if i < pos:
                layers.append(make_layer(i, "same", spec.basis_in,
                                         spec.basis_in, spec.basis_in.d_m))
            elif i == pos:
                layers.append(make_layer(i, "cross", spec.basis_in,
                                         spec.basis_out, spec.basis_in.d_m))
            else:
                layers.append(make_layer(i, "same", spec.basis_out,
                                         spec.basis_out, spec.basis_out.d_m))
        in_id, out_id = spec.basis_in.source_id, spec.basis_out.source_id

    else:  # temporal
        if spec.basis_time is None or spec.basis_out is None:
            raise InvalidSpec("temporal wiring needs basis_time and basis_out")
        bt, by = spec.basis_time, spec.basis_out
        if bt.kind != "fourier":
            raise InvalidSpec("basis_time must be a fourier basis")
        if bt.d_m % 2 == 0:
            raise InvalidSpec(f"temporal mode count d_t={bt.d_m} must be odd")
        if bt.d_m > by.d_m:
            raise InvalidSpec(
                "the lifting layer pairs temporal mode k with spatial mode k, "
                f"so d_t={bt.d_m} cannot exceed d_m={by.d_m}"
            )
        for i in range(spec.n_layers):
            if i < pos:
                layers.append(make_layer(i, "same", bt, bt, bt.d_m))
            elif i == pos:
                layers.append(make_layer(i, "lift", bt, by, bt.d_m,
                                         b_time=bt))
            else:
                layers.append(make_layer(i, "tensor", by, by, by.d_m,
                                         b_time=bt, d_t=bt.d_m))
        in_id = bt.source_id
        out_id = by.source_id + "*" + bt.source_id

    p = _init_pointwise(rng, spec.d_a, spec.d_v, spec.p_hidden, spec.activation)
    q = _init_pointwise(rng, spec.d_v, spec.d_u, spec.q_hidden, spec.activation)
    return NormModel(
        p=p, layers=layers, q=q, wiring=spec.wiring,
        input_domain_id=in_id, output_domain_id=out_id, spec=spec,
    )


def rebind(model: NormModel, basis_in: SpectralBasis,
           basis_out: Optional[SpectralBasis] = None) -> NormModel:
    """The same parameters bound to bases on a re-discretised domain.

    Mode counts must match the originals; parameters are shared, not copied.
    """
    basis_out = basis_out if basis_out is not None else basis_in
    new_layers = []
    for lay in model.layers:
        b_in = basis_in if _same_basis(lay.basis_in, model.layers[0].basis_in) else basis_out
        b_out = basis_out if _same_basis(lay.basis_out, model.layers[-1].basis_out) else basis_in
        if lay.basis_in.d_m != b_in.d_m or lay.basis_out.d_m != b_out.d_m:
            raise InvalidSpec("rebinding requires equal mode counts")
        new_layers.append(LLayerParams(
            kind=lay.kind, W=lay.W, b=lay.b, R=lay.R,
            basis_in=b_in, basis_out=b_out, activation=lay.activation,
            R_t=lay.R_t, basis_time=lay.basis_time,
        ))
    return NormModel(
        p=model.p, layers=new_layers, q=model.q, wiring=model.wiring,
        input_domain_id=basis_in.source_id,
        output_domain_id=basis_out.source_id,
        spec=model.spec, normalizer=model.normalizer,
    )


# ---------------------------------------------------------------------------
# forward primitives
#
# Batches travel internally in node-major layout (n_x, B, d): every spectral
# encode/decode then collapses to a single large GEMM, (d_m, n_x) times
# (n_x, B * d), and pointwise maps flatten to one GEMM over all rows. The
# public _forward_batch / _backward_batch boundary stays sample-major
# (B, n_x, d); the transposes happen once per call, not once per layer.
# ---------------------------------------------------------------------------

def _rows(X: np.ndarray) -> np.ndarray:
    return X.reshape(-1, X.shape[-1])


def _mix(R: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    # mix[k, b, l] = sum_j R[k, l, j] * coeffs[k, b, j]
    return np.matmul(coeffs, R.transpose(0, 2, 1))


def _mix_adjoint_coeffs(R: np.ndarray, dmix: np.ndarray) -> np.ndarray:
    # dcoeffs[k, b, j] = sum_l R[k, l, j] * dmix[k, b, l]
    return np.matmul(dmix, R)


def _mix_grad_R(dmix: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    # dR[k, l, j] = sum_b dmix[k, b, l] * coeffs[k, b, j]
    return np.matmul(dmix.transpose(0, 2, 1), coeffs)


def _encode(basis, V: np.ndarray) -> np.ndarray:
    n, B, d = V.shape
    return np.matmul(basis.pinv, V.reshape(n, B * d)).reshape(-1, B, d)


def _decode(basis, C: np.ndarray) -> np.ndarray:
    k, B, d = C.shape
    return np.matmul(basis.modes, C.reshape(k, B * d)).reshape(-1, B, d)


def _spectral_same(lay, V):
    coeffs = _encode(lay.basis_in, V)
    mixed = _mix(lay.R, coeffs)
    return _decode(lay.basis_out, mixed), coeffs


def _affine_rows(X: np.ndarray, W: np.ndarray, b) -> np.ndarray:
    Z = np.matmul(_rows(X), W).reshape(X.shape[:-1] + (W.shape[1],))
    if b is not None:
        Z += b
    return Z


def _layer_forward(lay: LLayerParams, V: np.ndarray, keep: bool):
    """One L-layer on a node-major batch; returns (output, cache-or-None)."""
    cache = {"V": V} if keep else None
    if lay.kind == "same":
        N, coeffs = _spectral_same(lay, V)
        Z = _affine_rows(V, lay.W, lay.b)
        Z += N
    elif lay.kind == "cross":
        N, coeffs = _spectral_same(lay, V)
        Z = _affine_rows(N, lay.W, lay.b)
        if keep:
            cache["N"] = N
    elif lay.kind == "lift":
        # temporal signal (n_t, B, d_v) -> spatiotemporal (n_t * n_y, B, d_v)
        phi_t = lay.basis_time.modes
        phi_y = lay.basis_out.modes[:, :lay.basis_time.d_m]
        coeffs = _encode(lay.basis_time, V)
        mixed = _mix(lay.R, coeffs)
        U4 = np.einsum("tk,yk,kbl->tybl", phi_t, phi_y, mixed, optimize=True)
        N = U4.reshape(-1, V.shape[1], V.shape[2])
        Z = _affine_rows(N, lay.W, lay.b)
        if keep:
            cache["N"] = N
    else:  # tensor
        n_t = lay.basis_time.n_x
        n_y = lay.basis_out.n_x
        V4 = V.reshape(n_t, n_y, V.shape[1], V.shape[2])
        # spatial spectral branch per time slice
        pinv_y, modes_y = lay.basis_out.pinv, lay.basis_out.modes
        coeffs = np.einsum("my,tybv->tmbv", pinv_y, V4, optimize=True)
        mixed = np.einsum("mlj,tmbj->tmbl", lay.R, coeffs, optimize=True)
        S1 = np.einsum("ym,tmbl->tybl", modes_y, mixed, optimize=True)
        # then the temporal branch across slices
        pinv_t, modes_t = lay.basis_time.pinv, lay.basis_time.modes
        coeffs_t = np.einsum("kt,tybv->kybv", pinv_t, S1, optimize=True)
        mixed_t = np.einsum("klj,kybj->kybl", lay.R_t, coeffs_t, optimize=True)
        T1 = np.einsum("tk,kybl->tybl", modes_t, mixed_t, optimize=True)
        Z = _affine_rows(V, lay.W, lay.b)
        Z += T1.reshape(Z.shape)
        if keep:
            cache["coeffs_t"] = coeffs_t
    if keep:
        cache["coeffs"] = coeffs
        cache["Z"] = Z
        out, cdf = _act_with_cdf(lay.activation, Z)
        cache["cdf"] = cdf
        return out, cache
    return _act(lay.activation, Z), cache


def _pointwise_forward(pw: PointwiseMap, X: np.ndarray, keep: bool):
    cache = {"X": X} if keep else None
    H = _affine_rows(X, pw.w1, pw.b1)
    if pw.w2 is None:
        return H, cache
    if keep:
        cache["H"] = H
        A1, cdf = _act_with_cdf(pw.activation, H)
        cache["A1"] = A1
        cache["cdf"] = cdf
        return _affine_rows(A1, pw.w2, pw.b2), cache
    return _affine_rows(_act(pw.activation, H), pw.w2, pw.b2), cache


def _forward_batch(model: NormModel, A: np.ndarray, keep: bool = False):
    A = np.asarray(A, dtype=np.float64)
    X = np.ascontiguousarray(A.transpose(1, 0, 2))
    V, p_cache = _pointwise_forward(model.p, X, keep)
    layer_caches = []
    for lay in model.layers:
        V, c = _layer_forward(lay, V, keep)
        layer_caches.append(c)
    U, q_cache = _pointwise_forward(model.q, V, keep)
    U = np.ascontiguousarray(U.transpose(1, 0, 2))
    if not keep:
        return U, None
    return U, {"p": p_cache, "layers": layer_caches, "q": q_cache, "V_q": V}


# ---------------------------------------------------------------------------
# public forward-facing operations
# ---------------------------------------------------------------------------

def spectral_block(R: np.ndarray, basis_in: SpectralBasis,
                   basis_out: SpectralBasis, values: np.ndarray) -> np.ndarray:
    """Encode -> per-mode channel mix -> decode, for one field.

    ``values`` has shape (n_x_in, d_v); the result has shape
    (n_x_out, d_v). The first dimension of ``R`` must equal the shared mode
    count of the two bases.
    """
    values = np.asarray(values, dtype=np.float64)
    if R.ndim != 3 or R.shape[1] != R.shape[2]:
        raise DimensionMismatch(f"R must be (d_m, d_v, d_v), got {R.shape}")
    if basis_in.d_m != R.shape[0] or basis_out.d_m != R.shape[0]:
        raise DimensionMismatch(
            f"R has {R.shape[0]} modes; bases have "
            f"{basis_in.d_m} and {basis_out.d_m}"
        )
    if values.shape[0] != basis_in.n_x:
        raise DimensionMismatch(
            f"field has {values.shape[0]} rows, basis has {basis_in.n_x}"
        )
    coeffs = basis_in.pinv @ values
    mixed = np.einsum("klj,kj->kl", R, coeffs, optimize=True)
    return basis_out.modes @ mixed


def l_layer_forward(lay: LLayerParams, values: np.ndarray) -> np.ndarray:
    """Apply one L-layer to a single field (n_x_in, d_v)."""
    values = np.asarray(values, dtype=np.float64)
    out, _ = _layer_forward(lay, values[:, None, :], keep=False)
    return out[:, 0, :]


def forward(model: NormModel, a: Field) -> Field:
    """Apply the operator to one input field.

    Raises
    ------
    DomainMismatch
        If the field carries a domain id different from the model's input
        domain.
    DimensionMismatch
        If node or channel counts disagree with the model.
    """
    if (a.domain_id is not None and model.input_domain_id is not None
            and a.domain_id != model.input_domain_id):
        raise DomainMismatch(
            f"field domain {a.domain_id[:12]}... does not match model input "
            f"domain {model.input_domain_id[:12]}..."
        )
    first = model.layers[0]
    n_in = (first.basis_time.n_x if first.kind == "lift" else first.basis_in.n_x)
    if a.n_x != n_in:
        raise DimensionMismatch(f"field has {a.n_x} rows, model expects {n_in}")
    if a.d_c != model.p.d_in:
        raise DimensionMismatch(
            f"field has {a.d_c} channels, model expects {model.p.d_in}"
        )
    out, _ = _forward_batch(model, a.values[None], keep=False)
    return Field(out[0], domain_id=model.output_domain_id)


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------

def _decode_adjoint(basis, dZ: np.ndarray) -> np.ndarray:
    n, B, d = dZ.shape
    return np.matmul(basis.modes.T, dZ.reshape(n, B * d)).reshape(-1, B, d)


def _encode_adjoint(basis, dC: np.ndarray) -> np.ndarray:
    k, B, d = dC.shape
    return np.matmul(basis.pinv.T, dC.reshape(k, B * d)).reshape(-1, B, d)


def _pointwise_backward(pw, cache, dY, grads, prefix):
    X = cache["X"]
    dYr = _rows(dY)
    if pw.w2 is None:
        grads[f"{prefix}.w1"] += np.matmul(_rows(X).T, dYr)
        grads[f"{prefix}.b1"] += dYr.sum(axis=0)
        return np.matmul(dYr, pw.w1.T).reshape(X.shape)
    H = cache["H"]
    grads[f"{prefix}.w2"] += np.matmul(_rows(cache["A1"]).T, dYr)
    grads[f"{prefix}.b2"] += dYr.sum(axis=0)
    dH = np.matmul(dYr, pw.w2.T).reshape(H.shape)
    dH *= _act_grad(pw.activation, H, cache["cdf"])
    dHr = _rows(dH)
    grads[f"{prefix}.w1"] += np.matmul(_rows(X).T, dHr)
    grads[f"{prefix}.b1"] += dHr.sum(axis=0)
    return np.matmul(dHr, pw.w1.T).reshape(X.shape)


def _layer_backward(lay, cache, dY, grads, prefix):
    V = cache["V"]
    if lay.activation == "identity":
        dZ = dY
    else:
        dZ = dY * _act_grad(lay.activation, cache["Z"], cache["cdf"])
    dZr = _rows(dZ)
    grads[f"{prefix}.b"] += dZr.sum(axis=0)

    if lay.kind == "same":
        grads[f"{prefix}.W"] += np.matmul(_rows(V).T, dZr)
        dV = np.matmul(dZr, lay.W.T).reshape(V.shape)
        dmix = _decode_adjoint(lay.basis_out, dZ)
        coeffs = cache["coeffs"]
        grads[f"{prefix}.R"] += _mix_grad_R(dmix, coeffs)
        dcoeffs = _mix_adjoint_coeffs(lay.R, dmix)
        dV += _encode_adjoint(lay.basis_in, dcoeffs)
        return dV

    if lay.kind == "cross":
        N = cache["N"]
        grads[f"{prefix}.W"] += np.matmul(_rows(N).T, dZr)
        dN = np.matmul(dZr, lay.W.T).reshape(N.shape)
        dmix = _decode_adjoint(lay.basis_out, dN)
        coeffs = cache["coeffs"]
        grads[f"{prefix}.R"] += _mix_grad_R(dmix, coeffs)
        dcoeffs = _mix_adjoint_coeffs(lay.R, dmix)
        return _encode_adjoint(lay.basis_in, dcoeffs)

    if lay.kind == "lift":
        N = cache["N"]
        grads[f"{prefix}.W"] += np.matmul(_rows(N).T, dZr)
        dN = np.matmul(dZr, lay.W.T).reshape(N.shape)
        phi_t = lay.basis_time.modes
        phi_y = lay.basis_out.modes[:, :lay.basis_time.d_m]
        dU4 = dN.reshape(phi_t.shape[0], phi_y.shape[0], dN.shape[1], -1)
        dmix = np.einsum("tk,yk,tybl->kbl", phi_t, phi_y, dU4, optimize=True)
        coeffs = cache["coeffs"]
        grads[f"{prefix}.R"] += _mix_grad_R(dmix, coeffs)
        dcoeffs = _mix_adjoint_coeffs(lay.R, dmix)
        return _encode_adjoint(lay.basis_time, dcoeffs)

    # tensor
    grads[f"{prefix}.W"] += np.matmul(_rows(V).T, dZr)
    dV = np.matmul(dZr, lay.W.T).reshape(V.shape)
    n_t = lay.basis_time.n_x
    n_y = lay.basis_out.n_x
    dT1 = dZ.reshape(n_t, n_y, dZ.shape[1], -1)
    # temporal branch backward
    phi_t, pinv_t = lay.basis_time.modes, lay.basis_time.pinv
    dmix_t = np.einsum("tk,tybl->kybl", phi_t, dT1, optimize=True)
    coeffs_t = cache["coeffs_t"]
    grads[f"{prefix}.R_t"] += np.einsum("kybl,kybj->klj", dmix_t, coeffs_t, optimize=True)
    dcoeffs_t = np.einsum("klj,kybl->kybj", lay.R_t, dmix_t, optimize=True)
    dS1 = np.einsum("kt,kybv->tybv", pinv_t, dcoeffs_t, optimize=True)
    # spatial branch backward
    phi_y, pinv_y = lay.basis_out.modes, lay.basis_out.pinv
    dmix_s = np.einsum("ym,tybl->tmbl", phi_y, dS1, optimize=True)
    coeffs = cache["coeffs"]
    grads[f"{prefix}.R"] += np.einsum("tmbl,tmbj->mlj", dmix_s, coeffs, optimize=True)
    dcoeffs = np.einsum("mlj,tmbl->tmbj", lay.R, dmix_s, optimize=True)
    dV4 = np.einsum("my,tmbv->tybv", pinv_y, dcoeffs, optimize=True)
    dV += dV4.reshape(dV.shape)
    return dV


def _backward_batch(model: NormModel, cache, dU: np.ndarray):
    """Parameter gradients plus input gradient for a batch."""
    dY = np.ascontiguousarray(np.asarray(dU, dtype=np.float64).transpose(1, 0, 2))
    grads = {name: np.zeros_like(arr) for name, arr in model.parameters()}
    dV = _pointwise_backward(model.q, cache["q"], dY, grads, "q")
    for i in range(len(model.layers) - 1, -1, -1):
        dV = _layer_backward(model.layers[i], cache["layers"][i], dV, grads,
                             f"layers.{i}")
    dX = _pointwise_backward(model.p, cache["p"], dV, grads, "p")
    return grads, np.ascontiguousarray(dX.transpose(1, 0, 2))


def backward(model: NormModel, a: Field, output_grad: np.ndarray):
    """Exact reverse-mode gradients for one input field.

    Parameters
    ----------
    model : NormModel
    a : Field
        The input the forward pass was evaluated at.
    output_grad : ndarray (n_out, d_u)
        Gradient of the scalar objective with respect to the model output.

    Returns
    -------
    (grads, input_grad)
        ``grads`` maps parameter names (as in ``model.parameters()``) to
        arrays of matching shape; ``input_grad`` has the input field's shape.
    """
    output_grad = np.asarray(output_grad, dtype=np.float64)
    _, cache = _forward_batch(model, a.values[None], keep=True)
    grads, dA = _backward_batch(model, cache, output_grad[None])
    return grads, dA[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _model_bases(model: NormModel) -> dict[str, SpectralBasis]:
    """The distinct bases a model references, keyed by role."""
    if model.wiring == "same":
        return {"in": model.layers[0].basis_in}
    if model.wiring == "cross":
        return {"in": model.layers[0].basis_in,
                "out": model.layers[-1].basis_out}
    lift = next(l for l in model.layers if l.kind == "lift")
    return {"time": lift.basis_time, "out": lift.basis_out}


def save_checkpoint(model: NormModel, dirpath) -> None:
    """Write a self-contained checkpoint directory.

    Contents: ``model.json`` (architecture, basis manifest, normalizer
    statistics), ``params.bin`` (magic ``NORMCK1\\0`` followed by the raw
    float64 parameter tensors in declaration order), and the referenced
    basis cache files, so evaluation needs nothing beyond the directory.
    """
    os.makedirs(dirpath, exist_ok=True)
    bases = _model_bases(model)
    manifest = {}
    for role, basis in bases.items():
        fname = f"basis_{role}.nsb"
        save_basis(basis, os.path.join(dirpath, fname))
        manifest[role] = {"file": fname, "source_id": basis.source_id,
                          "kind": basis.kind, "d_m": basis.d_m}
    cross_position = next(
        (i for i, l in enumerate(model.layers) if l.kind in ("cross", "lift")),
        None,
    )
    norm_blob = None
    if model.normalizer is not None:
        norm_blob = model.normalizer.to_dict()
    doc = {
        "format_version": 1,
        "wiring": model.wiring,
        "d_a": model.p.d_in,
        "d_v": model.layers[0].W.shape[0],
        "d_u": model.q.d_out,
        "n_layers": len(model.layers),
        "activation": model.p.activation,
        "cross_position": cross_position,
        "p_hidden": None if model.p.w2 is None else model.p.w1.shape[1],
        "q_hidden": None if model.q.w2 is None else model.q.w1.shape[1],
        "bases": manifest,
        "normalizer": norm_blob,
        "parameters": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in model.parameters()
        ],
    }
    with open(os.path.join(dirpath, "model.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(dirpath, "params.bin"), "wb") as fh:
        fh.write(_CKPT_MAGIC)
        for _, arr in model.parameters():
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_checkpoint(dirpath) -> NormModel:
    """Rebuild a model from a checkpoint directory."""
    try:
        with open(os.path.join(dirpath, "model.json"), "r") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{dirpath}: cannot read model.json: {exc}") from None
    if doc.get("format_version") != 1:
        raise ParseError(f"{dirpath}: unsupported checkpoint version")
    bases = {
        role: load_basis(os.path.join(dirpath, entry["file"]))
        for role, entry in doc["bases"].items()
    }
    spec = ModelSpec(
        wiring=doc["wiring"],
        d_a=doc["d_a"], d_v=doc["d_v"], d_u=doc["d_u"],
        n_layers=doc["n_layers"],
        basis_in=bases.get("in"),
        basis_out=bases.get("out", bases.get("in")),
        basis_time=bases.get("time"),
        activation=doc["activation"],
        cross_position=doc["cross_position"],
        p_hidden=doc["p_hidden"],
        q_hidden=doc["q_hidden"],
    )
    model = build_model(spec)
    with open(os.path.join(dirpath, "params.bin"), "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ParseError(f"{dirpath}: params.bin has a bad magic")
    params = model.parameters()
    expect = 8 + 8 * sum(arr.size for _, arr in params)
    if len(raw) != expect:
        raise ParseError(
            f"{dirpath}: params.bin holds {len(raw)} bytes, expected {expect}"
        )
    off = 8
    for _, arr in params:
        flat = np.frombuffer(raw, dtype="<f8", count=arr.size, offset=off)
        arr[...] = flat.reshape(arr.shape)
        off += 8 * arr.size
    if doc.get("normalizer") is not None:
        from .training import Normalizer

        model.normalizer = Normalizer.from_dict(doc["normalizer"])
    return model
