"""Release acceptance checklist.

Thirteen gate checks covering the full surface: coefficient solvers against
independent oracles, training descent, bound ordering, the approximation-error
harness, hard-assignment degenerations, output dimensions, democratic
aggregation, gradient correctness, end-to-end synthetic retrieval, the
embedding speed ratio, binary codes, and persistence.  Run with ``pytest -v``
for one verdict line per criterion; each test also prints ``criterion NN:
PASS`` / ``FAIL`` (visible with ``-s``).
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import numpy.testing as npt

from faemb.aggregate import (
    ImageSignature,
    aggregate_image,
    democratic_weights,
    fit_rotation_norm,
    fit_whitening,
    l2_normalize,
)
from faemb.binary import BinaryCode, encode_itq, fit_itq
from faemb.coding import (
    CodingModel,
    SolverParams,
    anchor_gradient,
    faemb_gamma,
    ffaemb_gamma,
    gamma_gradient,
    objective,
    train_coding,
)
from faemb.embed import (
    BoundInputs,
    EmbeddingConfig,
    bound_faemb,
    bound_ffaemb,
    embed_faemb,
    embed_vlad,
    embed_vlat,
    embedding_length,
    taylor_approx_error,
)
from faemb.pipeline import (
    benchmark_embedding,
    default_drop,
    embed_descriptor_set,
    signature_from_embedded,
)
from faemb.retrieval import build_binary_index, build_index, evaluate_map, search, synth_corpus
from faemb.storage import load_model, save_model

from oracles import (
    ffaemb_oracle,
    fd_gradient,
    hamming_rank_naive,
    ls_simplex_oracle,
    objective_naive,
    search_naive,
    vlad_naive,
    vlat_naive,
)


@contextmanager
def _verdict(num: int):
    try:
        yield
    except BaseException:
        print(f"criterion {num:02d}: FAIL")
        raise
    print(f"criterion {num:02d}: PASS")


def _feasible_gamma(rng: np.random.Generator, n: int) -> np.ndarray:
    g = rng.normal(size=n)
    return g + (1.0 - g.sum()) / n


def _cubed_l1(x: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.abs(x[:, None] - C).sum(axis=0) ** 3


# -- criterion 1 -------------------------------------------------------------


def test_criterion_01_closed_form_matches_kkt_oracle():
    with _verdict(1):
        rng = np.random.default_rng(101)
        mus = (0.0, 1e-3, 1e-2, 1.0)
        start = time.perf_counter()
        for i in range(200):
            d = int(rng.integers(2, 11))
            n = int(rng.integers(2, min(d, 6) + 1))
            x = rng.normal(size=d)
            C = rng.normal(size=(d, n))
            mu = mus[i % 4]
            gamma = ffaemb_gamma(x, CodingModel(anchors=C, mu=mu, variant="ffaemb"))
            ref = ffaemb_oracle(x, C, mu)
            npt.assert_allclose(gamma, ref, atol=1e-6, rtol=0.0)
            assert abs(gamma.sum() - 1.0) <= 1e-10
        assert time.perf_counter() - start < 5.0


# -- criterion 2 -------------------------------------------------------------


def _lagrangian_stationarity(x, gamma, model) -> float:
    g = gamma_gradient(x, gamma, model)
    a = _cubed_l1(x, model.anchors)
    nz = gamma != 0.0
    lam = g[nz].mean()
    worst = float(np.abs(g[nz] - lam).max())
    if (~nz).any():
        slack = np.abs(g[~nz] - lam) - 0.5 * model.mu * a[~nz]
        worst = max(worst, float(slack.max()))
    return worst


def test_criterion_02_newton_coder_stationarity():
    with _verdict(2):
        rng = np.random.default_rng(202)
        for _ in range(100):
            d = int(rng.integers(4, 46))
            n = int(rng.integers(2, min(d, 12) + 1))
            x = rng.normal(size=d)
            C = rng.normal(size=(d, n))
            a_max = _cubed_l1(x, C).max()
            mu = rng.uniform(0.5, 2.0) * 2e-5 / a_max
            model = CodingModel(anchors=C, mu=mu, variant="faemb")
            res = faemb_gamma(x, model)
            gamma = res.gamma
            assert abs(gamma.sum() - 1.0) <= 1e-8
            assert _lagrangian_stationarity(x, gamma, model) <= 1e-5
            q = objective_naive(x, C, gamma, mu, "faemb")
            uniform = np.full(n, 1.0 / n)
            assert q <= objective_naive(x, C, uniform, mu, "faemb") + 1e-12
            for j in range(n):
                onehot = np.zeros(n)
                onehot[j] = 1.0
                assert q <= objective_naive(x, C, onehot, mu, "faemb") + 1e-12
        # mu = 0 reduces to equality-constrained least squares
        for _ in range(25):
            d = int(rng.integers(4, 21))
            n = int(rng.integers(2, min(d, 8) + 1))
            x = rng.normal(size=d)
            C = rng.normal(size=(d, n))
            res = faemb_gamma(x, CodingModel(anchors=C, mu=0.0, variant="faemb"))
            npt.assert_allclose(res.gamma, ls_simplex_oracle(x, C), atol=1e-6, rtol=0.0)
        # decrement stopping reached within 200 iterations at n=8, d=45
        for _ in range(10):
            x = rng.normal(size=45)
            C = rng.normal(size=(45, 8))
            mu = rng.uniform(0.5, 2.0) * 2e-5 / _cubed_l1(x, C).max()
            res = faemb_gamma(x, CodingModel(anchors=C, mu=mu, variant="faemb"))
            assert res.decrement_iteration is not None
            assert res.decrement_iteration <= 200


# -- criterion 3 -------------------------------------------------------------


def test_criterion_03_training_trace_non_increasing():
    with _verdict(3):
        rng = np.random.default_rng(303)
        centers = 2.0 * rng.normal(size=(16, 8))
        assign = rng.integers(0, 8, size=5000)
        X = centers[:, assign] + 0.6 * rng.normal(size=(16, 5000))
        for variant in ("ffaemb", "faemb"):
            result = train_coding(
                X, n=8, mu=1e-2, variant=variant,
                params=SolverParams(max_outer_iters=20), seed=0,
            )
            trace = np.asarray(result.trace)
            assert len(trace) - 1 <= 20
            diffs = np.diff(trace)
            assert (diffs <= 1e-9).all(), f"{variant}: objective increased"
            drops = -diffs
            assert drops[-1] <= 0.05 * drops[0] + 1e-9, f"{variant}: not stabilized"


# -- criterion 4 -------------------------------------------------------------


def test_criterion_04_bound_ordering():
    with _verdict(4):
        rng = np.random.default_rng(404)
        for i in range(10_000):
            d = int(rng.integers(2, 9))
            n = int(rng.integers(2, 7))
            x = rng.normal(size=d)
            C = rng.normal(size=(d, n))
            gamma = rng.dirichlet(np.ones(n)) if i % 2 else _feasible_gamma(rng, n)
            M = rng.uniform(0.1, 10.0)
            model = CodingModel(anchors=C, mu=0.0, variant="faemb")
            tight = bound_faemb(x, gamma, model, M)
            relaxed = bound_ffaemb(x, gamma, model, M)
            assert tight <= relaxed + 1e-12 * (1.0 + relaxed)
        # single-anchor one-hot: both bounds coincide exactly
        x = rng.normal(size=5)
        model1 = CodingModel(anchors=rng.normal(size=(5, 1)), mu=0.0, variant="faemb")
        one = np.ones(1)
        assert bound_faemb(x, one, model1, 6.0) == bound_ffaemb(x, one, model1, 6.0)


# -- criterion 5 -------------------------------------------------------------


def test_criterion_05_taylor_error_bound():
    with _verdict(5):
        sine = BoundInputs(
            value=lambda z: float(np.sin(z).sum()),
            gradient=np.cos,
            hessian=lambda z: np.diag(-np.sin(z)),
            M=1.0,
            k=2,
        )
        rng = np.random.default_rng(505)
        for _ in range(1000):
            x = rng.uniform(-2.0, 2.0, size=3)
            C = rng.uniform(-2.0, 2.0, size=(3, 4))
            gamma = _feasible_gamma(rng, 4)
            model = CodingModel(anchors=C, mu=0.0, variant="faemb")
            for k in (1, 2):
                err, bound = taylor_approx_error(replace(sine, k=k), x, gamma, model)
                assert err <= bound + 1e-12
        # quadratic functions are reproduced exactly at second order
        for _ in range(200):
            d = int(rng.integers(2, 6))
            A = rng.normal(size=(d, d))
            A = 0.5 * (A + A.T)
            b = rng.normal(size=d)
            quad = BoundInputs(
                value=lambda z, A=A, b=b: float(0.5 * z @ A @ z + b @ z),
                gradient=lambda z, A=A, b=b: A @ z + b,
                hessian=lambda z, A=A: A,
                M=1.0,
                k=2,
            )
            x = rng.normal(size=d)
            C = rng.normal(size=(d, 3))
            gamma = _feasible_gamma(rng, 3)
            model = CodingModel(anchors=C, mu=0.0, variant="faemb")
            err, _ = taylor_approx_error(quad, x, gamma, model)
            assert err <= 1e-10


# -- criterion 6 -------------------------------------------------------------


def test_criterion_06_hard_assignment_degenerations():
    with _verdict(6):
        rng = np.random.default_rng(606)
        for _ in range(1000):
            d = int(rng.integers(2, 7))
            n = int(rng.integers(2, 6))
            x = rng.normal(size=d)
            C = rng.normal(size=(d, n))
            model = CodingModel(anchors=C, mu=0.0, variant="faemb")
            nearest = int(np.argmin(((x[:, None] - C) ** 2).sum(axis=0)))
            onehot = np.zeros(n)
            onehot[nearest] = 1.0
            npt.assert_array_equal(embed_faemb(x, onehot, model), embed_vlat(x, C))
            npt.assert_array_equal(embed_vlat(x, C), vlat_naive(x, C))
            npt.assert_allclose(embed_vlad(x, C), vlad_naive(x, C), atol=1e-12)


# -- criterion 7 -------------------------------------------------------------


def test_criterion_07_output_dimension_formulas():
    with _verdict(7):
        rng = np.random.default_rng(707)
        from faemb.core import DescriptorSet

        dset = DescriptorSet(image_id="dims", descriptors=rng.normal(size=(30, 45)))
        for n, pre, post in ((8, 8280, 7245), (16, 16560, 15525)):
            model = CodingModel(anchors=rng.normal(size=(45, n)), mu=1e-2, variant="ffaemb")
            E = embed_descriptor_set(dset, model)
            assert E.shape == (30, pre)
            assert embedding_length(n, 45) == pre == n * 45 * 46 // 2
            assert pre - default_drop(45) == post == (n - 1) * 45 * 46 // 2
        # the truncation rule itself, exercised end to end at a small width
        small = DescriptorSet(image_id="s", descriptors=rng.normal(size=(60, 12)))
        model = CodingModel(anchors=rng.normal(size=(12, 8)), mu=1e-2, variant="ffaemb")
        E = embed_descriptor_set(small, model)
        assert E.shape[1] == 8 * 78
        wm = fit_whitening(E, drop=default_drop(12))
        sig = signature_from_embedded(E, wm, image_id="s")
        assert len(sig.values) == 7 * 78


# -- criterion 8 -------------------------------------------------------------


def test_criterion_08_democratic_residual():
    with _verdict(8):
        rng = np.random.default_rng(808)

        def check(Phi):
            res = democratic_weights(Phi)
            assert res.converged
            psi = aggregate_image(Phi, res.weights)
            assert np.abs(res.weights * (Phi @ psi) - 1.0).max() <= 1e-3

        # bursty regime: a shared direction keeps every correlation positive,
        # so equal-contribution weights exist at any set size
        u = rng.normal(size=32)
        u /= np.linalg.norm(u)
        for count in (10, 17, 25, 50, 80, 120, 200, 333, 500):
            noise = rng.normal(size=(count, 32))
            noise /= np.linalg.norm(noise, axis=1, keepdims=True)
            rows = u + 0.35 * noise
            rows *= rng.uniform(0.5, 2.0, size=(count, 1))
            check(rows)
        # near-orthogonal regime: independent rows in a wider space
        for count in (10, 25, 50):
            base = rng.normal(size=(count, count + 16))
            base /= np.linalg.norm(base, axis=1, keepdims=True)
            check(base + 0.25 * rng.normal(size=base.shape))


# -- criterion 9 -------------------------------------------------------------


def test_criterion_09_gradient_finite_difference():
    with _verdict(9):
        rng = np.random.default_rng(909)
        for i in range(50):
            variant = "faemb" if i % 2 else "ffaemb"
            d = int(rng.integers(3, 10))
            n = int(rng.integers(2, min(d, 6) + 1))
            mu = 10.0 ** rng.uniform(-3.0, 0.0)
            x = rng.normal(size=d)
            C = rng.normal(size=(d, n))
            gamma = _feasible_gamma(rng, n)
            while np.abs(gamma).min() < 5e-2:
                gamma = _feasible_gamma(rng, n)
            model = CodingModel(anchors=C, mu=mu, variant=variant)
            g = gamma_gradient(x, gamma, model)
            g_fd = fd_gradient(lambda t: objective_naive(x, C, t, mu, variant), gamma)
            assert np.abs(g - g_fd).max() <= 1e-5 * (1.0 + np.abs(g_fd).max())

            m = 20
            X = rng.normal(size=(d, m))
            while np.abs(C[:, None, :] - X[:, :, None]).min() < 1e-3:
                C = rng.normal(size=(d, n))
            Gamma = np.column_stack([_feasible_gamma(rng, n) for _ in range(m)])
            G = anchor_gradient(X, Gamma, C, mu, variant)

            def batch_obj(cv, X=X, Gamma=Gamma, mu=mu, variant=variant, shape=C.shape):
                Cm = cv.reshape(shape, order="F")
                mdl = CodingModel(anchors=Cm, mu=mu, variant=variant)
                return objective(X, Gamma, mdl)

            G_fd = fd_gradient(batch_obj, C.flatten(order="F")).reshape(C.shape, order="F")
            assert np.abs(G - G_fd).max() <= 1e-5 * (1.0 + np.abs(G_fd).max())


# -- criterion 10 ------------------------------------------------------------


def _pipeline_signatures(sets, variant, seed=0, n=8, mu=1e-2, train_m=4000, outer=5):
    stacked = np.vstack([s.descriptors for s in sets])
    rng = np.random.default_rng(seed)
    take = rng.choice(stacked.shape[0], size=min(train_m, stacked.shape[0]), replace=False)
    result = train_coding(
        stacked[take].T, n=n, mu=mu, variant=variant,
        params=SolverParams(max_outer_iters=outer), seed=seed,
    )
    embedded = [embed_descriptor_set(s, result.model) for s in sets]
    wm = fit_whitening(np.vstack(embedded), drop=default_drop(stacked.shape[1]))
    return [
        signature_from_embedded(E, wm, image_id=s.image_id)
        for E, s in zip(embedded, sets)
    ]


def _corpus_map(sets, gt, variant, seed=0):
    sigs = _pipeline_signatures(sets, variant, seed=seed)
    report = evaluate_map(sigs, build_index(sigs), gt)
    return report.mean_average_precision


def test_criterion_10_synthetic_retrieval_map():
    with _verdict(10):
        sets, gt = synth_corpus(20, 5, d=16, sigma=0.3, seed=10, descriptors_per_image=200)
        map_ffaemb = _corpus_map(sets, gt, "ffaemb")
        assert map_ffaemb >= 0.90
        map_faemb = _corpus_map(sets, gt, "faemb")
        assert abs(map_faemb - map_ffaemb) <= 0.03
        clean_sets, clean_gt = synth_corpus(20, 5, d=16, sigma=0.0, seed=10, descriptors_per_image=200)
        assert _corpus_map(clean_sets, clean_gt, "ffaemb") == 1.0


# -- criterion 11 ------------------------------------------------------------


def test_criterion_11_embedding_speed_ratio():
    with _verdict(11):
        start = time.perf_counter()
        bench = benchmark_embedding(n=16, d=45, count=100_000, mu=1e-2, seed=0, faemb_sample=10_000)
        assert time.perf_counter() - start < 120.0
        assert bench.ratio >= 5.0


# -- criterion 12 ------------------------------------------------------------


def test_criterion_12_itq_and_binary_retrieval():
    with _verdict(12):
        rng = np.random.default_rng(121)
        Psi = rng.normal(size=(400, 64))
        Psi /= np.linalg.norm(Psi, axis=1, keepdims=True)
        fit = fit_itq(Psi, bits=32, iters=50, seed=0)
        R = fit.model.rotation
        assert np.abs(R @ R.T - np.eye(32)).max() <= 1e-10
        assert len(fit.quantization_errors) == 50
        assert (np.diff(fit.quantization_errors) <= 1e-9).all()

        sets, gt = synth_corpus(60, 5, d=16, sigma=0.5, seed=11, descriptors_per_image=100)
        sigs = _pipeline_signatures(sets, "ffaemb")
        S = np.vstack([s.values for s in sigs])
        fit256 = fit_itq(S, bits=256, iters=50, seed=0)
        assert np.abs(fit256.model.rotation @ fit256.model.rotation.T - np.eye(256)).max() <= 1e-10

        # real-valued baseline: the same 256-dim truncation, re-normalized
        Z = (S - fit256.model.mean) @ fit256.model.pca
        real = [l2_normalize(z, image_id=s.image_id) for z, s in zip(Z, sigs)]
        map_real = evaluate_map(real, build_index(real), gt).mean_average_precision
        codes = [encode_itq(s, fit256.model) for s in sigs]
        map_bin = evaluate_map(codes, build_binary_index(codes), gt).mean_average_precision
        assert map_real - map_bin <= 0.15


# -- criterion 13 ------------------------------------------------------------


def test_criterion_13_persistence_and_search_oracle(tmp_path):
    with _verdict(13):
        rng = np.random.default_rng(131)
        coding = CodingModel(anchors=rng.normal(size=(9, 4)), mu=0.37, variant="faemb")
        whitening = fit_whitening(rng.normal(size=(40, 12)), drop=3)
        rn = fit_rotation_norm(rng.normal(size=(50, 10)), keep=6)
        itq = fit_itq(rng.normal(size=(60, 16)), bits=8, iters=5, seed=2).model
        for tag, model in (("c", coding), ("w", whitening), ("r", rn), ("i", itq)):
            path = tmp_path / f"{tag}.famb"
            save_model(path, model)
            loaded = load_model(path)
            assert type(loaded) is type(model)
            for name, val in vars(model).items():
                if isinstance(val, np.ndarray):
                    npt.assert_array_equal(getattr(loaded, name), val, err_msg=name)
                else:
                    assert getattr(loaded, name) == val, name

        vectors = rng.normal(size=(1000, 32))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        ids = [f"img{i:04d}" for i in range(1000)]
        sigs = [ImageSignature(values=v, image_id=i) for v, i in zip(vectors, ids)]
        index = build_index(sigs)
        for qi in range(0, 1000, 40):
            got = search(sigs[qi], index)
            want = search_naive(vectors[qi], vectors, ids)
            assert [r[0] for r in got] == [r[0] for r in want]
            npt.assert_allclose([r[1] for r in got], [r[1] for r in want], atol=1e-12)

        bits = rng.integers(0, 2, size=(1000, 64)).astype(np.uint8)
        codes = [
            BinaryCode(packed=np.packbits(b, bitorder="little"), n_bits=64, image_id=i)
            for b, i in zip(bits, ids)
        ]
        bindex = build_binary_index(codes)
        for qi in range(0, 1000, 40):
            got = search(codes[qi], bindex)
            want = hamming_rank_naive(bits[qi], bits, ids)
            assert [r[0] for r in got] == [r[0] for r in want]
            assert [int(r[1]) for r in got] == [int(r[1]) for r in want]
