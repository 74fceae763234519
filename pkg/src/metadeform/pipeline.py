"""Training, test-time rotation search and latent optimisation, correspondence.

Query clouds are conditioned by moving their centroid to the origin (no
scaling).  Everything downstream works in that frame and maps results back
to the caller's frame at the end.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .cloudio import atomic_write_text
from .data import ModelBundle, canonical_shape, generate_dataset
from .errors import ContractError
from .geometry import NNIndex, RotationPair, as_points, brute_force_nearest, normalize_centroid
from .model import MODEL_KINDS, DESK_CONFIG

log = logging.getLogger(__name__)

CDF_THRESHOLDS = (0.01, 0.02, 0.05, 0.1, 0.2)


@dataclass
class TrainConfig:
    phase1_epochs: int = 25
    phase1_lr: float = 2e-5
    phase2_epochs: int = 15
    phase2_lr: float = 2e-5
    batch_size: int = 32
    seed: int = 0
    n_template: int | None = None
    dtype: str = "float32"
    max_steps: int | None = None

    def __post_init__(self):
        if min(self.phase1_epochs, self.phase2_epochs) < 0 or self.batch_size < 1:
            raise ContractError("epoch counts must be >= 0 and batch_size >= 1")
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ContractError("learning rates must be positive")

    def schedule(self):
        return [self.phase1_lr] * self.phase1_epochs + [self.phase2_lr] * self.phase2_epochs


@dataclass
class InferenceConfig:
    alpha_range: tuple = (-np.pi / 2, np.pi / 2)
    alpha_samples: int = 100
    beta_range: tuple = (-np.pi / 4, np.pi / 4)
    beta_samples: int = 25
    iterations: int = 3000
    lr: float = 5e-5
    search_rotation: bool = True
    # the printed algorithm initialises the second embedding from the first query
    init_second_from_first: bool = False
    nn: str = "tree"
    threads: int = 1

    def __post_init__(self):
        if self.alpha_samples < 1 or self.beta_samples < 1 or self.iterations < 0:
            raise ContractError("grid sample counts must be >= 1 and iterations >= 0")
        if self.nn not in ("tree", "brute"):
            raise ContractError(f"nn must be 'tree' or 'brute', got {self.nn!r}")

    def alphas(self):
        lo, hi = self.alpha_range
        return lo + np.arange(self.alpha_samples) * (hi - lo) / self.alpha_samples

    def betas(self):
        lo, hi = self.beta_range
        return lo + np.arange(self.beta_samples) * (hi - lo) / self.beta_samples

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle
    epoch_losses: list
    step_losses: list

    @property
    def model(self):
        return self.bundle.model


def _stack_batch(dataset, idx, dtype):
    shapes, targets = [], []
    for k in idx:
        pair = dataset[k]
        shape, centroid = normalize_centroid(as_points(pair.shape))
        shapes.append(shape)
        targets.append(as_points(pair.gt_targets) - centroid)
    return np.stack(shapes).astype(dtype), np.stack(targets).astype(dtype)


def supervised_loss(model, nodes, shapes, targets):
    """Mean over the batch of ``sum_i |p_hat_i - p_i|^2`` (one shape's loss)."""
    tape = nodes["template.v"].tape
    E = model.embed_nodes(nodes, tape.const(shapes))
    pred = model.deform_nodes(nodes, E, model.template_nodes(nodes))
    diff = dc.sub(pred, tape.const(targets))
    return dc.mul(dc.sum(dc.square(diff)), 1.0 / len(shapes))


def train_step(model, optimizer, shapes, targets, lr):
    with dc.Tape() as tape:
        nodes = model.bind(tape, trainable=model.trainable_keys())
        loss = supervised_loss(model, nodes, shapes, targets)
        grads = tape.backward(loss)
        dc.adam_step(model.params, {n.name: g for n, g in grads.items()}, optimizer, lr)
        return float(loss.value)


def new_model(kind="meta", config=DESK_CONFIG, seed=0):
    """Fresh model whose template is the canonical figure at ``config.n_template``."""
    return MODEL_KINDS[kind](config, canonical_shape(config.n_template).points, seed=seed)


def train(dataset, config, model=None, optimizer=None, callback=None):
    """Minimise the supervised deformation loss with mini-batch ADAM.

    Encoder, hypernetwork (or static decoder) and template offsets are all
    updated.  Returns per-epoch mean loss; deterministic for a fixed seed.
    """
    if not dataset:
        raise ContractError("dataset is empty")
    if model is None:
        n = config.n_template or len(dataset[0].gt_targets)
        model = new_model("meta", replace(DESK_CONFIG, n_template=n, dtype=config.dtype), config.seed)
    n = model.config.n_template
    for k, pair in enumerate(dataset):
        if len(pair.gt_targets) != n or len(pair.shape) != n:
            raise ContractError(f"shape {k} has {len(pair.gt_targets)} targets; template has {n} points")
    optimizer = optimizer or dc.AdamState()
    rng = np.random.default_rng(config.seed)
    epoch_losses, step_losses = [], []
    steps = 0
    for epoch, lr in enumerate(config.schedule()):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            shapes, targets = _stack_batch(dataset, order[start : start + config.batch_size], model.dtype)
            value = train_step(model, optimizer, shapes, targets, lr)
            batch_losses.append(value)
            step_losses.append(value)
            steps += 1
        if not batch_losses:
            break
        epoch_losses.append(float(np.mean(batch_losses)))
        if callback is not None:
            callback(epoch, epoch_losses[-1])
    info = {"epochs": len(epoch_losses), "steps": steps, "seed": config.seed, "epoch_losses": epoch_losses}
    return TrainResult(ModelBundle(model, optimizer, info), epoch_losses, step_losses)


# -- chamfer on the tape -----------------------------------------------------


def _nearest(ref, queries, nn, index=None):
    if nn == "brute":
        return brute_force_nearest(ref, queries)
    return (index or NNIndex(ref)).query_many(queries)


def chamfer_node(deformed, query, nn="tree", query_index=None):
    """Sum-form Chamfer between a deformed-template node and a fixed cloud.

    Nearest-neighbour assignments are constants of the current pairing, so
    gradients flow through the squared distances only.
    """
    tape = deformed.tape
    d = deformed.value
    to_query, _ = _nearest(query, d, nn, query_index)
    to_template, _ = _nearest(d, query, nn)
    q = tape.const(query)
    a = dc.sum(dc.square(dc.sub(deformed, tape.const(query[to_query]))))
    b = dc.sum(dc.square(dc.sub(dc.gather_rows(deformed, to_template), q)))
    return dc.add(a, b)


def latent_chamfer(model, E, query, template=None, nn="tree"):
    """Chamfer between the deformation produced by ``E`` and ``query``."""
    tape = dc.Tape()
    nodes = model.bind(tape)
    q = np.asarray(query, dtype=model.dtype)
    deformed = model.deform_nodes(nodes, tape.const(np.asarray(E, dtype=model.dtype)), model.template_nodes(nodes, template))
    return float(chamfer_node(deformed, q, nn).value)


# -- rotation search ---------------------------------------------------------


@dataclass
class RotationResult:
    alpha: float
    beta: float
    rotated: np.ndarray
    losses: np.ndarray  # (alpha_samples, beta_samples)
    index: tuple

    @property
    def rotation(self):
        return RotationPair(self.alpha, self.beta)

    @property
    def n_candidates(self):
        return int(self.losses.size)


def _grid_losses(model, points, rotations, nn, chunk=25):
    out = np.empty(len(rotations))
    tape = dc.Tape()
    nodes = model.bind(tape)
    T = model.template_nodes(nodes)
    for start in range(0, len(rotations), chunk):
        R = rotations[start : start + chunk]
        clouds = np.einsum("cij,nj->cni", R, points).astype(model.dtype)
        E = model.embed_nodes(nodes, tape.const(clouds))
        deformed = model.deform_nodes(nodes, E, T).value
        for c in range(len(R)):
            _, da = _nearest(clouds[c], deformed[c], nn)
            _, db = _nearest(deformed[c], clouds[c], nn)
            out[start + c] = float(da.sum() + db.sum())
    return out


def rotation_grid(cfg):
    """``(alpha, beta, R_z(beta) R_y(alpha))`` for every grid candidate, alpha-major."""
    alphas, betas = cfg.alphas(), cfg.betas()
    pairs = [(a, b) for a in alphas for b in betas]
    mats = np.stack([RotationPair(a, b).matrix() for a, b in pairs])
    return pairs, mats


def optimize_rotation(model, S_q, cfg=None):
    """Exhaustive pitch/yaw search minimising the unoptimised Chamfer loss.

    ``S_q`` should already be centred.  Ties resolve to the lowest
    ``(alpha index, beta index)``.
    """
    cfg = cfg or InferenceConfig()
    pts = as_points(S_q)
    pairs, mats = rotation_grid(cfg)
    if cfg.threads > 1:
        blocks = np.array_split(np.arange(len(mats)), cfg.threads)
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(lambda ix: _grid_losses(model, pts, mats[ix], cfg.nn), blocks))
        losses = np.concatenate(parts)
    else:
        losses = _grid_losses(model, pts, mats, cfg.nn)
    best = int(np.argmin(losses))
    a, b = pairs[best]
    grid = losses.reshape(cfg.alpha_samples, cfg.beta_samples)
    rotated = pts @ mats[best].T
    return RotationResult(float(a), float(b), rotated, grid, divmod(best, cfg.beta_samples))


# -- latent optimisation -----------------------------------------------------


@dataclass
class EmbeddingResult:
    embedding: np.ndarray
    loss: float
    initial_loss: float
    losses: list  # loss of the k-th iterate, k = 0..iterations
    best_so_far: list  # running minimum of ``losses``


def optimize_embedding(model, S_q, cfg=None, init=None, template=None):
    """ADAM on the embedding alone, networks frozen; returns the best iterate.

    ``init`` defaults to the encoder's embedding of ``S_q``.  ``template``
    optionally replaces the learned template (hot swap).
    """
    cfg = cfg or InferenceConfig()
    q = np.asarray(as_points(S_q), dtype=model.dtype)
    E = (model.encode(q) if init is None else np.asarray(init, dtype=model.dtype)).copy()
    query_index = NNIndex(q) if cfg.nn == "tree" else None
    state = dc.AdamState()
    best_E, best = E.copy(), np.inf
    losses, running = [], []
    for it in range(cfg.iterations + 1):
        with dc.Tape() as tape:
            nodes = model.bind(tape)
            e = tape.leaf(E, name="E")
            deformed = model.deform_nodes(nodes, e, model.template_nodes(nodes, template))
            loss = chamfer_node(deformed, q, cfg.nn, query_index)
            value = float(loss.value)
            losses.append(value)
            if value < best:
                best, best_E = value, E.copy()
            running.append(best)
            if it == cfg.iterations:
                break
            grad = tape.backward(loss)[e]
        dc.adam_step({"E": E}, {"E": grad}, state, cfg.lr)
    return EmbeddingResult(best_E, best, losses[0], losses, running)


# -- correspondence ----------------------------------------------------------


@dataclass
class CorrespondenceSet:
    """Pairs ``(src_points[k], dst_points[k])`` in the callers' frames."""

    src_index: np.ndarray
    dst_index: np.ndarray
    src_points: np.ndarray
    dst_points: np.ndarray
    template_index: np.ndarray
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.src_index)

    def pairs(self):
        return list(zip(map(tuple, self.src_points), map(tuple, self.dst_points)))


@dataclass
class PreparedQuery:
    original: np.ndarray
    centroid: np.ndarray
    rotation: RotationPair
    points: np.ndarray  # centred and rotated


def prepare_query(model, S_q, cfg):
    pts = as_points(S_q)
    centred, centroid = normalize_centroid(pts)
    rot = RotationPair()
    rotated = centred
    if cfg.search_rotation:
        res = optimize_rotation(model, centred, cfg)
        rot, rotated = res.rotation, res.rotated
    return PreparedQuery(pts, centroid, rot, np.asarray(rotated, dtype=model.dtype))


def correspond(model, S_q1, S_q2, cfg=None, template=None):
    """Pairwise correspondence through the shared template.

    For each point of ``S_q1``: the nearest template point under deformation
    one is carried through deformation two and matched to the nearest point
    of ``S_q2``.  One pair per point of ``S_q1``, in order.
    """
    cfg = cfg or InferenceConfig()
    q1 = prepare_query(model, S_q1, cfg)
    q2 = prepare_query(model, S_q2, cfg)
    e1 = optimize_embedding(model, q1.points, cfg, template=template)
    init2 = model.encode(q1.points) if cfg.init_second_from_first else None
    e2 = optimize_embedding(model, q2.points, cfg, init=init2, template=template)
    d1 = model.deform(e1.embedding, template)
    d2 = model.deform(e2.embedding, template)
    t_hat, _ = _nearest(d1, q1.points, cfg.nn)
    dst, _ = _nearest(q2.points, d2[t_hat], cfg.nn)
    src = np.arange(len(q1.points))
    info = {
        "rotation_1": [q1.rotation.alpha, q1.rotation.beta],
        "rotation_2": [q2.rotation.alpha, q2.rotation.beta],
        "chamfer_1": e1.loss,
        "chamfer_2": e2.loss,
        "config_hash": cfg.digest(),
    }
    return CorrespondenceSet(src, dst, q1.original[src], q2.original[dst], t_hat, info)


def deform_query(model, S_q, cfg=None, template=None):
    """Rotation search, latent optimisation and the deformed template.

    Returns ``(deformed points in the query's original frame, EmbeddingResult,
    PreparedQuery)``.
    """
    cfg = cfg or InferenceConfig()
    q = prepare_query(model, S_q, cfg)
    emb = optimize_embedding(model, q.points, cfg, template=template)
    deformed = model.deform(emb.embedding, template).astype(float)
    back = deformed @ q.rotation.matrix() + q.centroid
    return back, emb, q


def hot_swap_template(model, dense_base, transfer_offsets=False):
    """A replacement template for inference.

    With ``transfer_offsets`` each dense point inherits the learned offset of
    its nearest base template point; otherwise the dense points are used as
    given.
    """
    dense = np.asarray(as_points(dense_base), dtype=model.dtype)
    if not transfer_offsets:
        return dense
    idx, _ = NNIndex(model.template_base).query_many(dense)
    return dense + model.params["template.v"][idx]


# -- evaluation --------------------------------------------------------------


@dataclass
class CorrespondenceMetrics:
    mean_error: float
    max_error: float
    exact_rate: float
    thresholds: tuple
    cdf: tuple

    def as_dict(self):
        d = {"mean_error": self.mean_error, "max_error": self.max_error, "exact_rate": self.exact_rate}
        for t, c in zip(self.thresholds, self.cdf):
            d[f"cdf@{t:g}"] = c
        return d


def eval_correspondence(C, gt, thresholds=CDF_THRESHOLDS):
    """Euclidean error of ``C.dst_points`` against ground truth.

    ``gt[i]`` is the true location, in the second cloud, of source point
    ``i``; rows of NaN mark missing ground truth.
    """
    gt = np.asarray(gt, dtype=float)
    if gt.ndim != 2 or gt.shape[1] != 3:
        raise ContractError(f"ground truth must be (N, 3), got {gt.shape}")
    if len(C) and C.src_index.max() >= len(gt):
        raise ContractError(f"ground truth has {len(gt)} rows; source index {C.src_index.max()} missing")
    target = gt[C.src_index]
    if not np.all(np.isfinite(target)):
        raise ContractError("ground truth missing for some source indices")
    err = np.linalg.norm(np.asarray(C.dst_points, dtype=float) - target, axis=1)
    cdf = tuple(float(np.mean(err <= t)) for t in thresholds)
    return CorrespondenceMetrics(float(err.mean()), float(err.max()), float(np.mean(err == 0)), tuple(thresholds), cdf)


def random_baseline_error(S_q2, gt, seed=0):
    """Mean error of matching each source point to a random permutation of ``S_q2``."""
    pts = as_points(S_q2)
    gt = np.asarray(gt, dtype=float)
    perm = np.random.default_rng(seed).permutation(len(pts))[: len(gt)]
    return float(np.linalg.norm(pts[perm] - gt, axis=1).mean())


def write_correspondences(C, path, cfg=None, seed=None):
    head = f"# pairs {len(C)} src_points {len(C)} config {C.info.get('config_hash', cfg.digest() if cfg else 'none')}"
    if seed is not None:
        head += f" seed {seed}"
    rows = [head, "# src_index src_x src_y src_z dst_index dst_x dst_y dst_z"]
    for i, j, p, q in zip(C.src_index, C.dst_index, C.src_points, C.dst_points):
        rows.append(f"{i} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {j} {q[0]:.9g} {q[1]:.9g} {q[2]:.9g}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def read_correspondences(path):
    src, dst, sp, dp = [], [], [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            f = line.split()
            src.append(int(f[0]))
            sp.append([float(v) for v in f[1:4]])
            dst.append(int(f[4]))
            dp.append([float(v) for v in f[5:8]])
    n = len(src)
    return CorrespondenceSet(np.array(src, dtype=int), np.array(dst, dtype=int), np.array(sp).reshape(n, 3),
                             np.array(dp).reshape(n, 3), np.full(n, -1))


def write_metrics(metrics, text_path, json_path=None, extra=None):
    """Flat ``key value`` text report plus an optional JSON twin."""
    d = dict(extra or {})
    d.update(metrics if isinstance(metrics, dict) else metrics.as_dict())
    atomic_write_text(text_path, "".join(f"{k} {v}\n" for k, v in d.items()))
    if json_path is not None:
        atomic_write_text(json_path, json.dumps(d, indent=2, sort_keys=True) + "\n")


# -- benchmark ---------------------------------------------------------------


@dataclass
class BenchSizes:
    batch: int = 32
    decode_points: int = 100_000
    correspond_iterations: int = 20


@dataclass
class BenchRow:
    name: str
    meta_median: float
    lvc_median: float
    meta_std: float
    lvc_std: float

    @property
    def ratio(self):
        return self.meta_median / self.lvc_median


@dataclass
class BenchReport:
    rows: list
    repetitions: int

    def row(self, name):
        return next(r for r in self.rows if r.name == name)

    def format(self):
        lines = [f"# repetitions {self.repetitions}", "# case meta_median_s lvc_median_s meta_std_s lvc_std_s ratio"]
        for r in self.rows:
            lines.append(f"{r.name} {r.meta_median:.6g} {r.lvc_median:.6g} {r.meta_std:.3g} {r.lvc_std:.3g} {r.ratio:.4f}")
        return "\n".join(lines) + "\n"


def _timed_pair(fa, fb, repetitions):
    """Median and spread of two workloads, alternated so drift hits both alike."""
    fa(), fb()  # warm-up: first-touch allocations and lazy imports
    ta, tb = [], []
    for _ in range(repetitions):
        for fn, out in ((fa, ta), (fb, tb)):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
    return (float(np.median(ta)), float(np.std(ta))), (float(np.median(tb)), float(np.std(tb)))


def _decode_many(model, E, points):
    tape = dc.Tape()
    nodes = model.bind(tape)
    return model.deform_nodes(nodes, tape.const(E), tape.const(points)).value


def benchmark_decoders(model_meta, model_lvc, sizes=None, repetitions=20, seed=0, cases=("train_step", "decode", "correspond")):
    """Median wall-clock of meta vs LVC for a training step, bulk decoding and
    one correspondence run.  Models are copied; the originals are untouched.
    """
    if model_meta.config.decoder_hidden != model_lvc.config.decoder_hidden or \
            model_meta.config.decoder_layers != model_lvc.config.decoder_layers:
        raise ContractError("meta and LVC decoders must have matching hidden widths and depth")
    sizes = sizes or BenchSizes()
    repetitions = max(1, int(repetitions))
    n = model_meta.config.n_template
    data = generate_dataset(sizes.batch + 1, n, seed)
    rng = np.random.default_rng(seed)
    rows = []

    def add_row(name, fa, fb):
        (ma, sa), (mb, sb) = _timed_pair(fa, fb, repetitions)
        rows.append(BenchRow(name, ma, mb, sa, sb))

    if "train_step" in cases:
        steps = []
        for model in (model_meta, model_lvc):
            m, opt = copy.deepcopy(model), dc.AdamState()
            shapes, targets = _stack_batch(data, range(sizes.batch), m.dtype)
            steps.append(lambda m=m, opt=opt, s=shapes, t=targets: train_step(m, opt, s, t, 1e-5))
        add_row("train_step", *steps)
    if "decode" in cases:
        pts = rng.uniform(-1, 1, (sizes.decode_points, 3))
        q = as_points(data[0].shape) - as_points(data[0].shape).mean(axis=0)
        fns = []
        for model in (model_meta, model_lvc):
            fns.append(lambda model=model, p=pts.astype(model.dtype), E=model.encode(q): _decode_many(model, E, p))
        add_row("decode", *fns)
    if "correspond" in cases:
        cfg = InferenceConfig(iterations=sizes.correspond_iterations, search_rotation=False)
        add_row("correspond", *(lambda model=model: correspond(model, data[0].shape, data[1].shape, cfg)
                                for model in (model_meta, model_lvc)))
    return BenchReport(rows, repetitions)


def static_first_layer_multiplies(config):
    """Per-point multiplies in the first decoder layer: ``(meta, lvc)``."""
    h = config.decoder_hidden
    return 3 * h, (3 + config.embedding_size) * h
