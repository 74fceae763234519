"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The overfit model (8 shapes, 512 points, desk widths) is trained once per
session and shared by criteria 5, 6, 7 and 10.  Criterion 8 uses a second
model trained on 64 shapes, so that held-out poses start near a good fit.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from metadeform import diffcore as dc
from metadeform.data import canonical_shape, generate_dataset
from metadeform.geometry import RotationPair, chamfer_mean, normalize_centroid
from metadeform.model import (
    DESK_CONFIG,
    PAPER_CONFIG,
    MetaDecoderParams,
    MetaDeformNet,
    ModelConfig,
    accumulation_ulp,
    count_params,
    dynamic_bias_decomposition,
    meta_decoder_nodes,
)
from metadeform.pipeline import (
    BenchSizes,
    InferenceConfig,
    TrainConfig,
    benchmark_decoders,
    chamfer_node,
    correspond,
    eval_correspondence,
    hot_swap_template,
    latent_chamfer,
    new_model,
    optimize_embedding,
    optimize_rotation,
    supervised_loss,
    train,
)

from helpers import central_diff, criterion, rel_error

OVERFIT_SHAPES = 8
OVERFIT_POINTS = 512
# lr per phase and epoch counts; batch 8 = the whole set, so one step per epoch
OVERFIT_SCHEDULE = TrainConfig(phase1_epochs=450, phase1_lr=5e-6, phase2_epochs=150, phase2_lr=1e-6, batch_size=8)


@pytest.fixture(scope="session")
def overfit():
    data = generate_dataset(OVERFIT_SHAPES, OVERFIT_POINTS, seed=0)
    model = new_model("meta", replace(DESK_CONFIG, n_template=OVERFIT_POINTS), seed=0)
    t0 = time.perf_counter()
    result = train(data, OVERFIT_SCHEDULE, model)
    return result, data, time.perf_counter() - t0


# -- 1 -----------------------------------------------------------------------

GRAD_TINY = ModelConfig(n_template=5, encoder_widths=(3, 4), refine_widths=(4,), decoder_hidden=3, decoder_layers=2,
                        dtype="float64")
INSTANCES = 100


def _randomised_tiny(rng):
    model = MetaDeformNet(GRAD_TINY, rng.normal(size=(5, 3)) * 0.5, seed=int(rng.integers(2**31)))
    for v in model.params.values():
        if not np.any(v):
            v[...] = rng.normal(size=v.shape) * 0.3
    return model


def _grad_scaled_affine_chain(rng):
    widths = [3] + [int(rng.integers(2, 6))] * int(rng.integers(1, 3)) + [3]
    layers = [
        [rng.normal(size=(o, i)), rng.normal(size=o), rng.normal(size=o)] for i, o in zip(widths[:-1], widths[1:])
    ]
    pts = rng.normal(size=(4, 3))
    probe = rng.normal(size=(4, 3))

    def value():
        return float(np.sum(meta_decoder_nodes(layers, dc.Tape().const(pts)).value * probe))

    tape = dc.Tape()
    leaves = [[tape.leaf(a) for a in layer] for layer in layers]
    x = tape.leaf(pts)
    grads = tape.backward(dc.sum(dc.mul(meta_decoder_nodes(leaves, x), tape.const(probe))))
    errs = [rel_error(grads[x], central_diff(value, pts))]
    for layer, nodes in zip(layers, leaves):
        errs += [rel_error(grads[n], central_diff(value, a)) for a, n in zip(layer, nodes)]
    return max(errs)


def _grad_encoder(rng):
    model = _randomised_tiny(rng)
    pts = rng.normal(size=(7, 3))
    probe = rng.normal(size=4)

    def value():
        return float(model.encode(pts) @ probe)

    tape = dc.Tape()
    nodes = model.bind(tape, trainable=[k for k in model.params if k.startswith(("enc.", "ref."))])
    x = tape.leaf(pts)
    grads = tape.backward(dc.sum(dc.mul(model.embed_nodes(nodes, x), tape.const(probe))))
    errs = [rel_error(grads[x], central_diff(value, pts))]
    errs += [rel_error(grads[nodes[k]], central_diff(value, model.params[k]))
             for k in model.params if k.startswith(("enc.", "ref."))]
    return max(errs)


def _grad_supervised_loss(rng):
    model = _randomised_tiny(rng)
    shapes = rng.normal(size=(2, 6, 3))
    targets = rng.normal(size=(2, 5, 3))

    def value():
        tape = dc.Tape()
        return float(supervised_loss(model, model.bind(tape), shapes, targets).value)

    tape = dc.Tape()
    nodes = model.bind(tape, trainable=list(model.params))
    grads = tape.backward(supervised_loss(model, nodes, shapes, targets))
    return max(rel_error(grads[nodes[k]], central_diff(value, v)) for k, v in model.params.items())


def _grad_latent_chamfer(rng):
    model = _randomised_tiny(rng)
    query = rng.normal(size=(8, 3))
    E = rng.normal(size=4)
    tape = dc.Tape()
    nodes = model.bind(tape)
    e = tape.leaf(E)
    grads = tape.backward(chamfer_node(model.deform_nodes(nodes, e, model.template_nodes(nodes)), query))
    return rel_error(grads[e], central_diff(lambda: latent_chamfer(model, E, query), E))


def test_criterion_01_gradient_suite():
    with criterion(1, "gradients match central differences (rel < 1e-5, 4 x 100 instances, < 60 s)") as out:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        worst = {}
        for name, check in [("chain", _grad_scaled_affine_chain), ("encoder", _grad_encoder),
                            ("eq5_loss", _grad_supervised_loss), ("chamfer_E", _grad_latent_chamfer)]:
            worst[name] = max(check(rng) for _ in range(INSTANCES))
            out[f"max_rel_{name}"] = worst[name]
        out["seconds"] = time.perf_counter() - t0
        assert all(v < 1e-5 for v in worst.values())
        assert out["seconds"] < 60


# -- 2, 3 --------------------------------------------------------------------


def test_criterion_02_lvc_decomposition():
    with criterion(2, "a_direct == a_split within 4 ulp, 1000 instances") as out:
        rng = np.random.default_rng(2)
        D, H = DESK_CONFIG.embedding_size, DESK_CONFIG.decoder_hidden
        worst = 0.0
        for _ in range(1000):
            W = (rng.normal(size=(H, 3 + D)) / np.sqrt(3 + D)).astype(np.float32)
            b = rng.normal(size=H).astype(np.float32)
            p = rng.normal(size=3).astype(np.float32)
            E = np.abs(rng.normal(size=D)).astype(np.float32)
            a_direct, a_split = dynamic_bias_decomposition(W, b, p, E)
            ulp = accumulation_ulp(W, np.concatenate([p, E]), b)
            worst = max(worst, float(np.max(np.abs(a_direct - a_split) / ulp)))
        out["max_ulps"] = worst
        assert worst <= 4


def test_criterion_03_scale_row_equivalence():
    with criterion(3, "scaling s_k by lambda == scaling row k of W, within 4 ulp") as out:
        rng = np.random.default_rng(3)
        H = DESK_CONFIG.decoder_hidden
        worst = 0.0
        for _ in range(1000):
            W = (rng.normal(size=(H, H)) / np.sqrt(H)).astype(np.float32)
            s = rng.normal(size=H).astype(np.float32)
            b = rng.normal(size=H).astype(np.float32)
            x = np.maximum(rng.normal(size=(16, H)), 0).astype(np.float32)
            k = int(rng.integers(H))
            lam = np.float32(rng.uniform(-10, 10))
            s2, W2 = s.copy(), W.copy()
            s2[k] *= lam
            W2[k] *= lam
            via_s = dc.scaled_affine(W, s2, b, x).value
            via_row = dc.scaled_affine(W2, s, b, x).value
            ulp = np.stack([accumulation_ulp(W2, xi, b, s2) for xi in x])
            worst = max(worst, float(np.max(np.abs(via_s - via_row) / ulp)))
        out["max_ulps"] = worst
        assert worst <= 4


# -- 4 -----------------------------------------------------------------------


def test_criterion_04_parameter_accounting():
    with criterion(4, "hypernet output sizes: 320 for layer 1, 17,414 in total") as out:
        widths = DESK_CONFIG.decoder_widths()
        per_layer, total = count_params(widths)
        model = MetaDeformNet(replace(DESK_CONFIG, n_template=4), np.zeros((4, 3)))
        produced = [model.params[f"hyp.{i}.c"].size for i in range(len(per_layer))]
        theta = model.predict_params(np.zeros(DESK_CONFIG.embedding_size, np.float32))
        out["per_layer"] = produced
        out["total"] = theta.size()
        assert isinstance(theta, MetaDecoderParams)
        assert produced == per_layer == [320, 4224, 4224, 4224, 4224, 198]
        assert theta.size() == total == 17414
        assert PAPER_CONFIG.decoder_widths() == widths


# -- 5, 6 ---------------------------------------------------------------------

POINT_ESTIMATE = InferenceConfig(iterations=0, search_rotation=False)


def test_criterion_05_overfit_convergence(overfit):
    with criterion(5, "overfit 8 shapes: loss < 5% of initial, mean corr. error < 0.05, < 10 min") as out:
        result, data, train_seconds = overfit
        t0 = time.perf_counter()
        losses = result.step_losses
        errors = []
        for a in range(OVERFIT_SHAPES):
            b = (a + 1) % OVERFIT_SHAPES
            C = correspond(result.model, data[a].shape, data[b].shape, POINT_ESTIMATE)
            # both shapes list the canonical points in the same order
            errors.append(eval_correspondence(C, data[b].shape.points).mean_error)
        out["steps"] = len(losses)
        out["loss_ratio"] = losses[-1] / losses[0]
        out["mean_error"] = float(np.mean(errors))
        out["seconds"] = train_seconds + time.perf_counter() - t0
        assert len(losses) <= 2000
        assert losses[-1] < 0.05 * losses[0]
        assert out["mean_error"] < 0.05
        assert out["seconds"] < 600


def _subsample(cloud, n, seed):
    idx = np.sort(np.random.default_rng(seed).choice(len(cloud), n, replace=False))
    return cloud.points[idx]


def test_criterion_06_algorithm_oracle(overfit):
    with criterion(6, "tree == brute-force correspond on <= 200 points; self-match >= 99%") as out:
        result, data, _ = overfit
        model = result.model
        cfg = InferenceConfig(iterations=100, alpha_samples=20, beta_samples=5)
        identical = []
        for a, b, n in [(0, 1, 200), (2, 5, 150)]:
            s1, s2 = _subsample(data[a].shape, n, a), _subsample(data[b].shape, n, b)
            tree = correspond(model, s1, s2, cfg)
            brute = correspond(model, s1, s2, replace(cfg, nn="brute"))
            identical.append(bool(np.array_equal(tree.dst_index, brute.dst_index)
                                  and np.array_equal(tree.template_index, brute.template_index)))
        exact, total = 0, 0
        for pair in data:
            C = correspond(model, pair.shape, pair.shape, POINT_ESTIMATE)
            exact += int(np.sum(C.dst_index == C.src_index))
            total += len(C)
        out["pairwise_identical"] = identical
        out["self_match"] = exact / total
        assert all(identical)
        assert exact / total >= 0.99


# -- 7 -----------------------------------------------------------------------


def test_criterion_07_rotation_search(overfit):
    with criterion(7, "pre-rotated query recovered within one grid step; 2500 candidates") as out:
        result, data, _ = overfit
        cfg = InferenceConfig()
        ka, kb = 60, 15
        rot = RotationPair(cfg.alphas()[ka], cfg.betas()[kb])
        query, _ = normalize_centroid(data[0].shape)
        # apply the inverse; the search should find the rotation that undoes it
        tilted = query.points @ rot.matrix()
        found = optimize_rotation(result.model, tilted, cfg)
        upright = optimize_rotation(result.model, query, cfg)
        out["candidates"] = found.n_candidates
        out["found"] = found.index
        out["upright"] = upright.index
        assert found.n_candidates == upright.n_candidates == 2500
        assert abs(found.index[0] - ka) <= 1 and abs(found.index[1] - kb) <= 1
        # beta = 0 lies between grid indices 12 and 13
        assert abs(upright.alpha) <= np.pi / 100 + 1e-12 and abs(upright.beta) <= np.pi / 50 + 1e-12


# -- 8 -----------------------------------------------------------------------

GENERAL_SHAPES = 64
# 250 epochs of 8 steps = 2000 steps
GENERAL_SCHEDULE = TrainConfig(phase1_epochs=190, phase1_lr=5e-6, phase2_epochs=60, phase2_lr=1e-6, batch_size=8)
VALIDATION_SHAPES = 3
# held-out poses sampled independently of the 512-point template, as a scan would be
VALIDATION_POINTS = 2000


@pytest.fixture(scope="session")
def generalising():
    data = generate_dataset(GENERAL_SHAPES, OVERFIT_POINTS, seed=0)
    model = new_model("meta", replace(DESK_CONFIG, n_template=OVERFIT_POINTS), seed=0)
    return train(data, GENERAL_SCHEDULE, model).model


def test_criterion_08_latent_optimisation(generalising):
    with criterion(8, "best L_CD(3000) < L_CD(0); L_CD(1000) within 10% of L_CD(3000)") as out:
        at0, at1000, at3000 = [], [], []
        for pair in generate_dataset(VALIDATION_SHAPES, VALIDATION_POINTS, seed=1000):
            query, _ = normalize_centroid(pair.shape)
            best = optimize_embedding(generalising, query, InferenceConfig()).best_so_far
            at0.append(best[0])
            at1000.append(best[1000])
            at3000.append(best[3000])
        gap = (sum(at1000) - sum(at3000)) / sum(at3000)
        out["L0"] = at0
        out["L1000"] = at1000
        out["L3000"] = at3000
        out["gap_1000_vs_3000"] = gap
        assert all(c < a for a, c in zip(at0, at3000))
        assert gap <= 0.10


# -- 9 -----------------------------------------------------------------------


def test_criterion_09_speed_direction():
    with criterion(9, "meta/LVC median ratio < 1 for training step and decode (20 reps)") as out:
        meta = new_model("meta", DESK_CONFIG, seed=0)
        lvc = new_model("lvc", DESK_CONFIG, seed=0)
        sizes = BenchSizes(batch=32, decode_points=100_000)
        report = benchmark_decoders(meta, lvc, sizes, repetitions=20, cases=("train_step", "decode"))
        print(report.format())
        for row in report.rows:
            out[f"{row.name}_ratio"] = row.ratio
            out[f"{row.name}_meta_s"] = row.meta_median
            out[f"{row.name}_lvc_s"] = row.lvc_median
        assert report.repetitions >= 20
        assert all(row.ratio < 1.0 for row in report.rows)


# -- 10 ----------------------------------------------------------------------


def test_criterion_10_template_hot_swap(overfit):
    with criterion(10, "4096-point unseen template: mean L_CD <= 110% of learned template") as out:
        result, _, _ = overfit
        model = result.model
        dense = hot_swap_template(model, canonical_shape(4096))
        cfg = InferenceConfig(iterations=200)
        ratios = []
        for pair in generate_dataset(3, 2048, seed=2000):
            query, _ = normalize_centroid(pair.shape)
            e_learned = optimize_embedding(model, query, cfg).embedding
            e_dense = optimize_embedding(model, query, cfg, template=dense).embedding
            learned = chamfer_mean(model.deform(e_learned), query)
            swapped = model.deform(e_dense, dense)
            assert swapped.shape == (4096, 3) and np.all(np.isfinite(swapped))
            ratios.append(chamfer_mean(swapped, query) / learned)
        out["ratios"] = ratios
        assert max(ratios) <= 1.10
