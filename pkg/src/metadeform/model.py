"""Encoder, hypernetwork, dynamic (meta) decoder, learnable template, LVC baseline.

Parameters of a model live in one flat ``dict[str, ndarray]``.  Key order is
fixed at construction and is the on-disk payload order of checkpoints:

* ``enc.{k}.W`` / ``enc.{k}.b``  shared per-point MLP of the encoder
* ``ref.{k}.W`` / ``ref.{k}.b``  post-pool refinement MLP
* ``hyp.{i}.A`` / ``hyp.{i}.c``  one linear map per decoder layer (meta only)
* ``lvc.{i}.W`` / ``lvc.{i}.b``  static decoder layers (LVC only)
* ``template.v``                 learnable per-point translations

Each hypernetwork output vector for decoder layer ``i`` is unpacked as
``W`` (``out*in`` values, row-major) then ``s`` (``out``) then ``b`` (``out``).

Hidden layers use ReLU, output layers are linear; the decoders predict a
residual that is added to the template point.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError, NumericError, ShapeError
from .geometry import PointCloud, as_points


@dataclass(frozen=True)
class ModelConfig:
    n_template: int = 1024
    encoder_widths: tuple = (64, 128, 1024)
    refine_widths: tuple = (1024, 1024)
    decoder_hidden: int = 64
    decoder_layers: int = 6
    dtype: str = "float32"
    hyper_init_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "refine_widths", tuple(int(w) for w in self.refine_widths))
        if self.decoder_layers < 1 or self.n_template < 1:
            raise ContractError("decoder_layers and n_template must be positive")
        if not self.encoder_widths or not self.refine_widths:
            raise ContractError("encoder and refinement MLPs need at least one layer")

    @property
    def embedding_size(self):
        return self.refine_widths[-1]

    def decoder_widths(self):
        """Widths ``[3, hidden, ..., hidden, 3]`` of the decoder (L + 1 entries)."""
        return [3] + [self.decoder_hidden] * (self.decoder_layers - 1) + [3]

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["refine_widths"] = list(self.refine_widths)
        return d


# Full-scale template resolution (one body-mesh vertex per point).
PAPER_CONFIG = ModelConfig(n_template=6890)
# Same widths with a template small enough for one CPU core.
DESK_CONFIG = ModelConfig()


def layer_param_count(k_in, k_out):
    """Scalars predicted for one scaled-affine layer: weights, scales and biases."""
    return k_in * k_out + k_out + k_out


def count_params(layer_sizes):
    """Per-layer and total predicted-parameter counts for a width chain.

    >>> count_params([3, 64, 64, 64, 64, 64, 3])
    ([320, 4224, 4224, 4224, 4224, 198], 17414)
    """
    sizes = [int(n) for n in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ContractError(f"need at least two positive widths, got {sizes}")
    per_layer = [layer_param_count(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    return per_layer, sum(per_layer)


@dataclass
class MetaDecoderParams:
    """Per-layer ``(W, s, b)`` triples, optionally with a leading batch axis."""

    layers: list = field(default_factory=list)

    def __len__(self):
        return len(self.layers)

    def size(self):
        return sum(W.shape[-1] * W.shape[-2] + s.shape[-1] + b.shape[-1] for W, s, b in self.layers)


@dataclass
class Template:
    """Base points ``q`` plus learnable translations ``v``."""

    base: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        if np.shape(self.base) != np.shape(self.offsets):
            raise ShapeError(f"template base {np.shape(self.base)} and offsets {np.shape(self.offsets)} differ")


def template_points(template):
    """Effective template ``q + v`` as a point cloud."""
    return PointCloud(np.asarray(template.base) + np.asarray(template.offsets))


# -- graph builders (operate on tape nodes) ----------------------------------


def encoder_nodes(nodes, config, points):
    """Per-point MLP, column max-pool, refinement MLP.

    ``points`` is ``(N, 3)`` or ``(B, N, 3)``; the result is ``(D,)`` or ``(B, D)``.
    """
    # per-point layers run channel-major so the pool reduces contiguous rows
    x = dc.swap_last(points)
    for k in range(len(config.encoder_widths)):
        x = dc.relu(dc.channel_affine(nodes[f"enc.{k}.W"], nodes[f"enc.{k}.b"], x))
    x, _ = dc.maxpool_columns(x, axis=-1)
    last = len(config.refine_widths) - 1
    for k in range(last + 1):
        x = dc.affine(nodes[f"ref.{k}.W"], nodes[f"ref.{k}.b"], x)
        if k < last:
            x = dc.relu(x)
    return x


def hyper_nodes(nodes, config, E):
    """Map embeddings to decoder parameter triples, one linear map per layer."""
    widths = config.decoder_widths()
    layers = []
    for i, (k_in, k_out) in enumerate(zip(widths[:-1], widths[1:])):
        theta = dc.affine(nodes[f"hyp.{i}.A"], nodes[f"hyp.{i}.c"], E)
        layers.append(unpack_layer(theta, k_in, k_out))
    return layers


def unpack_layer(theta, k_in, k_out):
    """Split a predicted vector into ``W (out, in)``, ``s (out)``, ``b (out)``."""
    lead = theta.shape[:-1]
    if theta.shape[-1] != layer_param_count(k_in, k_out):
        raise ShapeError(f"layer ({k_in}->{k_out}) needs {layer_param_count(k_in, k_out)} values, got {theta.shape[-1]}")
    nw = k_in * k_out
    W = dc.reshape(dc.take(theta, (Ellipsis, slice(0, nw))), lead + (k_out, k_in))
    s = dc.take(theta, (Ellipsis, slice(nw, nw + k_out)))
    b = dc.take(theta, (Ellipsis, slice(nw + k_out, nw + 2 * k_out)))
    return W, s, b


def meta_decoder_nodes(layers, points):
    """Residual ``g(p)`` through the scaled-affine chain; ReLU between layers."""
    x = points
    for i, (W, s, b) in enumerate(layers):
        x = dc.scaled_affine(W, s, b, x)
        if i < len(layers) - 1:
            x = dc.relu(x)
    return x


def lvc_decoder_nodes(nodes, config, points, E):
    """Static MLP on ``(p ; E)``.  ``points`` (N, 3) with ``E`` (D,), or batched."""
    pts = points.value
    if pts.ndim == 2:
        e = dc.broadcast_to(E, (pts.shape[0], E.shape[-1]))
    else:
        e = dc.broadcast_to(dc.reshape(E, (E.shape[0], 1, E.shape[-1])), pts.shape[:2] + (E.shape[-1],))
    x = dc.concat([points, e], axis=-1)
    n = config.decoder_layers
    for i in range(n):
        x = dc.affine(nodes[f"lvc.{i}.W"], nodes[f"lvc.{i}.b"], x)
        if i < n - 1:
            x = dc.relu(x)
    return x


# -- models ------------------------------------------------------------------


def _he(rng, shape, fan_in, dtype, gain=2.0):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class DeformationModel:
    """Shared encoder, template handling and tape binding."""

    kind = None

    def __init__(self, config, template_base, params=None, seed=0):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(config.dtype)
        base = as_points(template_base).astype(self.dtype)
        if len(base) != config.n_template:
            raise ContractError(f"template has {len(base)} points, config expects {config.n_template}")
        self.template_base = base
        if params is None:
            params = self._init_params(np.random.default_rng(self.seed))
        self.params = params

    # construction
    def _init_encoder(self, rng):
        cfg, dt, p = self.config, self.dtype, {}
        prev = 3
        for k, w in enumerate(cfg.encoder_widths):
            p[f"enc.{k}.W"] = _he(rng, (w, prev), prev, dt)
            p[f"enc.{k}.b"] = np.zeros(w, dt)
            prev = w
        last = len(cfg.refine_widths) - 1
        for k, w in enumerate(cfg.refine_widths):
            p[f"ref.{k}.W"] = _he(rng, (w, prev), prev, dt, gain=2.0 if k < last else 1.0)
            p[f"ref.{k}.b"] = np.zeros(w, dt)
            prev = w
        return p

    def _init_params(self, rng):
        raise NotImplementedError

    # binding
    def bind(self, tape, trainable=()):
        """Place parameters on ``tape``; keys in ``trainable`` become leaves."""
        trainable = set(trainable)
        return {
            k: tape.leaf(v, name=k) if k in trainable else tape.const(v, name=k)
            for k, v in self.params.items()
        }

    def template_nodes(self, nodes, base=None):
        """``q + v`` on the tape; a hot-swapped ``base`` is used without offsets."""
        if base is not None:
            return nodes["template.v"].tape.const(np.asarray(base, dtype=self.dtype))
        return dc.add(nodes["template.v"].tape.const(self.template_base), nodes["template.v"])

    def embed_nodes(self, nodes, points):
        return encoder_nodes(nodes, self.config, points)

    def deform_nodes(self, nodes, E, template):
        """Deformed template points ``p + g(p)`` for embedding(s) ``E``."""
        raise NotImplementedError

    # numpy conveniences
    def template(self):
        return Template(self.template_base, self.params["template.v"])

    def template_points(self):
        return self.template_base + self.params["template.v"]

    def encode(self, points):
        tape = dc.Tape()
        nodes = self.bind(tape)
        pts = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=self.dtype)
        return self.embed_nodes(nodes, tape.const(pts)).value

    def deform(self, E, template=None):
        """Deform the learned template (or a supplied one) with embedding ``E``."""
        tape = dc.Tape()
        nodes = self.bind(tape)
        T = self.template_nodes(nodes, template)
        return self.deform_nodes(nodes, tape.const(np.asarray(E, dtype=self.dtype)), T).value

    def trainable_keys(self):
        return list(self.params)

    def n_scalars(self):
        return int(sum(v.size for v in self.params.values()))


class MetaDeformNet(DeformationModel):
    """Encoder ``f`` -> hypernetwork ``h`` -> dynamic decoder ``g``."""

    kind = "meta"

    def _init_params(self, rng):
        cfg, dt = self.config, self.dtype
        p = self._init_encoder(rng)
        D = cfg.embedding_size
        widths = cfg.decoder_widths()
        last = len(widths) - 2
        for i, (k_in, k_out) in enumerate(zip(widths[:-1], widths[1:])):
            n = layer_param_count(k_in, k_out)
            nw = k_in * k_out
            c = np.zeros(n, dt)
            c[nw : nw + k_out] = 1.0  # s
            if i == last:
                # identity deformation at start: W = 0, s = 1, b = 0, independent of E
                A = np.zeros((n, D), dt)
            else:
                w_std = np.sqrt(2.0 / k_in)
                c[:nw] = rng.standard_normal(nw) * w_std
                row_std = np.empty(n)
                row_std[:nw] = w_std
                row_std[nw:] = 1.0
                A = (rng.standard_normal((n, D)) * (cfg.hyper_init_scale / np.sqrt(D)) * row_std[:, None]).astype(dt)
            p[f"hyp.{i}.A"] = A
            p[f"hyp.{i}.c"] = c
        p["template.v"] = np.zeros((cfg.n_template, 3), dt)
        return p

    def hyper_nodes(self, nodes, E):
        return hyper_nodes(nodes, self.config, E)

    def deform_nodes(self, nodes, E, template):
        layers = hyper_nodes(nodes, self.config, E)
        T = template
        if E.value.ndim == 2 and T.value.ndim == 2:
            T = dc.broadcast_to(T, (E.shape[0],) + T.shape)
        return dc.add(T, meta_decoder_nodes(layers, T))

    def predict_params(self, E):
        return predict_params(self, E)


class LvcDeformNet(DeformationModel):
    """Same encoder and template, static decoder fed ``(p ; E)``."""

    kind = "lvc"

    def _init_params(self, rng):
        cfg, dt = self.config, self.dtype
        p = self._init_encoder(rng)
        widths = cfg.decoder_widths()
        widths[0] = 3 + cfg.embedding_size
        last = len(widths) - 2
        for i, (k_in, k_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == last:
                p[f"lvc.{i}.W"] = np.zeros((k_out, k_in), dt)
            else:
                p[f"lvc.{i}.W"] = _he(rng, (k_out, k_in), k_in, dt)
            p[f"lvc.{i}.b"] = np.zeros(k_out, dt)
        p["template.v"] = np.zeros((cfg.n_template, 3), dt)
        return p

    def deform_nodes(self, nodes, E, template):
        T = template
        if E.value.ndim == 2 and T.value.ndim == 2:
            T = dc.broadcast_to(T, (E.shape[0],) + T.shape)
        return dc.add(T, lvc_decoder_nodes(nodes, self.config, T, E))


MODEL_KINDS = {"meta": MetaDeformNet, "lvc": LvcDeformNet}


# -- public numpy-level operations -------------------------------------------


def encode(model, S_q):
    """Global feature embedding of a query cloud."""
    return model.encode(as_points(S_q))


def predict_params(model, E):
    """Decoder parameter triples predicted from ``E`` (numpy arrays)."""
    E = np.asarray(E, dtype=model.dtype)
    if E.shape[-1] != model.config.embedding_size:
        raise ShapeError(f"embedding has length {E.shape[-1]}, expected {model.config.embedding_size}")
    tape = dc.Tape()
    nodes = model.bind(tape)
    layers = hyper_nodes(nodes, model.config, tape.const(E))
    return MetaDecoderParams([(W.value.copy(), s.value.copy(), b.value.copy()) for W, s, b in layers])


def _check_finite(theta):
    for i, layer in enumerate(theta.layers):
        for name, arr in zip("Wsb", layer):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite value in decoder layer {i} parameter {name}")


def meta_decode(theta, p_t):
    """Residual and deformed location of template point(s) ``p_t``.

    Returns ``(delta, p_t + delta)``.
    """
    _check_finite(theta)
    p = np.asarray(p_t, dtype=theta.layers[0][0].dtype)
    tape = dc.Tape()
    delta = meta_decoder_nodes(theta.layers, tape.const(p)).value
    return delta, p + delta


def deform_template(theta, template):
    """Apply the decoder to every template point, preserving order."""
    if isinstance(template, Template):
        pts = template_points(template).points
    else:
        pts = as_points(template)
    _, moved = meta_decode(theta, pts)
    return PointCloud(moved)


def lvc_decode(model, p_t, E):
    """Baseline decoder: ``p_t + MLP(p_t ; E)``."""
    E = np.asarray(E, dtype=model.dtype)
    if E.shape != (model.config.embedding_size,):
        raise ShapeError(f"embedding has shape {E.shape}, expected ({model.config.embedding_size},)")
    p = np.asarray(p_t, dtype=model.dtype)
    single = p.ndim == 1
    p2 = p.reshape(-1, 3)
    tape = dc.Tape()
    nodes = model.bind(tape)
    out = p2 + lvc_decoder_nodes(nodes, model.config, tape.const(p2), tape.const(E)).value
    return out[0] if single else out


def dynamic_bias_decomposition(W, b, p_t, E):
    """First-layer pre-activation of an LVC decoder computed two ways.

    ``a_direct = W (p;E) + b`` and ``a_split = W y + W z + b`` with
    ``y = (p;0)`` and ``z = (0;E)``.  ``W z`` is the only query-dependent
    term: a bias that changes with the shape.
    """
    W = np.asarray(W)
    p = np.asarray(p_t, dtype=W.dtype)
    E = np.asarray(E, dtype=W.dtype)
    if W.shape[1] != 3 + E.shape[0] or p.shape != (3,):
        raise ShapeError(f"W has {W.shape[1]} columns; needs 3 + len(E) = {3 + E.shape[0]}")
    x = np.concatenate([p, E])
    y = np.concatenate([p, np.zeros_like(E)])
    z = np.concatenate([np.zeros_like(p), E])
    a_direct = W @ x + b
    a_split = W @ y + W @ z + b
    return a_direct, a_split


def accumulation_ulp(W, x, b, s=None):
    """One ulp at the magnitude of ``|W| |x| (*|s|) + |b|``, per output row.

    The rounding scale of a dot product; used to compare two evaluation
    orders of the same linear expression.
    """
    mag = np.abs(W) @ np.abs(x)
    if s is not None:
        mag = mag * np.abs(s)
    mag = mag + np.abs(b)
    return np.spacing(mag.astype(np.asarray(W).dtype))
