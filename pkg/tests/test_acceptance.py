"""Acceptance criteria. Each test prints one PASS/FAIL line and asserts the criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the ablation criterion
trains the full toy benchmark for three seeds and takes most of the time.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from diffcode.codebook import Codebook, lookup, nearest_code, rq_dequantize, rq_quantize
from diffcode.diffusion import denoise_loop, forward_diffuse, make_schedule, reverse_step
from diffcode.metrics import psnr, rmse, ssim
from diffcode.networks import Decoder, Encoder, RestorationNet, StageConfig, TaskClassifier, decode_vq
from diffcode.numerics import (
    Tensor,
    channel_norm,
    clip,
    concat,
    conv2d,
    cross_entropy,
    exp,
    global_avg_pool,
    gradcheck,
    l1_loss,
    leaky_relu,
    linear,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mse_loss,
    sigmoid,
    softmax,
    sqrt,
    stack,
    tanh,
    upsample_nearest,
)
from diffcode.pipeline import load_config
from diffcode.pipeline.ablation import ORDER, run_ablation
from diffcode.pipeline.checkpoint import file_hash
from diffcode.pipeline.stages import evaluate_prediction, infer, load_data, train_stage1, train_stage2, train_stage3
from diffcode.rng import stream
from diffcode.routing import GatingVector, TarmLayer, route_argmax_invariance_check, tarm_forward

from oracles import brute_nearest, ssim_constant
from test_codebook import routing_sensitivity

BENCHMARK = Path(__file__).resolve().parent.parent / "configs" / "benchmark.json"
MINI = StageConfig([1, 1, 1, 1], [2, 2, 2, 2], 8)


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def test_quantization_oracle(verdict):
    r = stream(0, "acceptance", "quantization")
    pairs = []
    for _ in range(10_000):
        m, c = int(r.integers(1, 65)), int(r.integers(1, 9))
        pairs.append((r.normal(size=c), r.normal(size=(m, c))))
    start = time.perf_counter()
    got = [nearest_code(q, Codebook(Tensor(codes), 0))[0] for q, codes in pairs]
    elapsed = time.perf_counter() - start
    mismatches = sum(g != brute_nearest(q, codes) for g, (q, codes) in zip(got, pairs))
    roundtrip_bad = 0
    for i in range(200):
        book = Codebook(Tensor(r.normal(size=(16, 4)).astype(np.float32 if i % 2 else np.float64)), 0)
        res = rq_quantize(r.normal(size=(4, 3, 3)).astype(book.codes.dtype), book, int(r.integers(1, 6)))
        roundtrip_bad += not np.array_equal(rq_dequantize(res.indices, book), res.quantized)
    ok = mismatches == 0 and roundtrip_bad == 0 and elapsed < 10.0
    verdict("quantization oracle", ok,
            f"{len(pairs)} pairs, {mismatches} mismatches, {roundtrip_bad} round-trip failures, {elapsed:.2f} s")


def test_rq_optimality(verdict):
    r = stream(0, "acceptance", "rq")
    violations = monotone_bad = 0
    for _ in range(1000):
        m, c, depth = int(r.integers(2, 17)), int(r.integers(1, 6)), int(r.integers(1, 7))
        codes = r.normal(size=(m, c))
        codes[int(r.integers(m))] = 0.0
        res = rq_quantize(r.normal(size=(c, 2, 2)), Codebook(Tensor(codes), 0), depth)
        for d in range(depth):
            after = np.linalg.norm(res.residuals[d + 1], axis=1)
            alt = np.linalg.norm(res.residuals[d][:, None, :] - codes[None], axis=2)
            violations += int(np.any(after[:, None] > alt))
        norms = np.linalg.norm(res.residuals, axis=2)
        monotone_bad += int(np.any(np.diff(norms, axis=0) > 0))
    verdict("RQ optimality", violations == 0 and monotone_bad == 0,
            f"1000 instances, {violations} per-depth violations, {monotone_bad} non-monotone")


def test_schedule_algebra(verdict):
    s = make_schedule(8, 0.1, 0.99)
    ratio_err = max(abs(s.alpha_bar[t] / s.alpha_bar[t - 1] - s.alpha[t]) for t in range(1, 8))
    r = stream(0, "acceptance", "schedule")
    one = make_schedule(1, 0.1, 0.1)
    z = r.normal(size=(3, 4))
    z1 = forward_diffuse(Tensor(z), one, 1, Tensor(np.zeros_like(z)))
    back = reverse_step(z1, None, 1, one, lambda z_t, c, t: Tensor(np.zeros_like(z_t.data))).data
    t1_err = float(np.abs(back - z).max())
    zs = [r.normal(size=(4, 3))]
    for t in range(1, 9):
        zs.append(math.sqrt(s.alpha[t - 1]) * zs[-1] + math.sqrt(1 - s.alpha[t - 1]) * r.normal(size=(4, 3)))
    eps = {t: (zs[t] - math.sqrt(s.alpha[t - 1]) * zs[t - 1]) * math.sqrt(1 - s.alpha_bar[t - 1]) / (1 - s.alpha[t - 1])
           for t in range(1, 9)}
    chain = denoise_loop(Tensor(zs[-1]), None, s, lambda z_t, c, t: Tensor(eps[t])).data
    chain_err = float(np.abs(chain - zs[0]).max())
    ok = ratio_err <= 1e-12 and t1_err <= 1e-15 and chain_err <= 1e-8
    verdict("schedule algebra", ok,
            f"ratio err {ratio_err:.1e}, T=1 recovery err {t1_err:.1e}, 8-step chain err {chain_err:.1e}")


def _op_checks(r):
    def leaf(*shape, lo=-1.0, hi=1.0):
        return Tensor(r.uniform(lo, hi, size=shape), requires_grad=True)

    x, k, b = leaf(2, 4, 5, 5), leaf(6, 2, 3, 3), leaf(6)
    w4 = r.normal(size=(2, 6, 3, 3))
    a, m = leaf(3, 4), leaf(4, 5)
    v = leaf(3, 5)
    pos = leaf(3, 4, lo=0.5, hi=1.5)
    img = leaf(2, 3, 4, 4)
    wimg = r.normal(size=(2, 3, 8, 8))
    return {
        "conv2d": (lambda: (conv2d(x, k, b, 2, 1, 2) * w4).sum(), [x, k, b]),
        "linear/matmul": (lambda: (linear(a, m.transpose(), None) ** 2).sum() + tanh(matmul(a, m)).sum(), [a, m]),
        "softmax family": (lambda: (softmax(v) * v).sum() + log_softmax(v).sum() + logsumexp(v).sum(), [v]),
        "cross_entropy": (lambda: cross_entropy(v, np.array([0, 4, 2])), [v]),
        "elementwise": (lambda: (exp(a) + log(pos) + sqrt(pos) + sigmoid(a) + leaky_relu(a, 0.1)
                                 + clip(pos, 0.8, 1.2) + (a ** 3)).sum(), [a, pos]),
        "shape ops": (lambda: (stack([concat([a, a], axis=1), concat([pos, pos], axis=1)], 0)[1, :, 2:] ** 2).mean(),
                      [a, pos]),
        "image ops": (lambda: (upsample_nearest(img, 2) * wimg).sum() + (channel_norm(img) * img).sum()
                      + (global_avg_pool(img) ** 2).sum(), [img]),
        "losses": (lambda: mse_loss(a, pos) + l1_loss(a, pos), [a, pos]),
    }


def _experts_check(r):
    class Scale:
        def __init__(self, value):
            self.w = Tensor(np.array(value), requires_grad=True)

        def __call__(self, t):
            return t * self.w

    experts = [Scale(v) for v in (0.5, -1.0, 2.0)]
    xs = Tensor(r.normal(size=(4, 2)), requires_grad=True)
    logits = Tensor(r.normal(size=(4, 3)) * 2, requires_grad=True)
    w = r.normal(size=(4, 2))
    return lambda: (tarm_forward(xs, GatingVector(logits, 2), TarmLayer(experts)) * w).sum(), \
        [xs, logits] + [e.w for e in experts]


def _miniature_restorer(r):
    net = RestorationNet(MINI, 2, stream(0, "mini"), np.float64)
    clf = TaskClassifier(2, stream(0, "clf"), 2, np.float64)
    lq = Tensor(r.uniform(0.3, 0.7, size=(1, 1, 8, 8)))
    ref = Tensor(r.uniform(0.3, 0.7, size=(1, 1, 8, 8)))
    hq = Tensor(r.uniform(0.0, 1.0, size=(1, 1, 8, 8)))
    return lambda: ((net(lq, ref, GatingVector(clf(lq), 2)) - hq) ** 2).mean(), net.parameters() + clf.parameters()


def _miniature_autoencoder(r):
    enc = Encoder(MINI, 1, 2, stream(0, "enc"), np.float64)
    dec = Decoder(MINI, 2, stream(0, "dec"), np.float64)
    book = Codebook(Tensor(r.normal(size=(4, 2)), requires_grad=True), 0)
    x = Tensor(r.uniform(0, 1, size=(2, 1, 8, 8)))
    idx = rq_quantize(enc(x).data, book, 2).indices

    def loss():
        z = enc(x)
        return l1_loss(decode_vq(z, dec), x) + mse_loss(z, lookup(book, idx))

    return loss, enc.parameters() + dec.parameters() + [book.codes]


def test_gradient_suite(verdict):
    r = np.random.default_rng(1234)
    checks = dict(_op_checks(r))
    checks["routed experts"] = _experts_check(r)
    checks["miniature restorer"] = _miniature_restorer(r)
    checks["miniature VQ autoencoder"] = _miniature_autoencoder(r)
    worst = {}
    for name, (fn, params) in checks.items():
        try:
            worst[name] = gradcheck(fn, params)
        except AssertionError as exc:
            worst[name] = float(str(exc).split("error ")[1].split(" ")[0])
    enc_mid, codes_commit, enc_commit, codes_mid = routing_sensitivity(np.random.default_rng(7))
    grads_ok = all(v < 1e-4 for v in worst.values())
    routing_ok = enc_mid < 1e-10 and codes_commit < 1e-10 and enc_commit > 0 and codes_mid > 0
    detail = (f"{len(worst)} checks, worst rel err {max(worst.values()):.1e} ({max(worst, key=worst.get)}); "
              f"encoder wrt codebook term {enc_mid:.1e}, codes wrt commitment term {codes_commit:.1e}")
    verdict("gradient suite", grads_ok and routing_ok, detail)


def test_gating_contract(verdict):
    r = stream(0, "acceptance", "gating")
    sum_err, wrong_k, not_bitwise, affine_bad = 0.0, 0, 0, 0

    class Counting:
        def __init__(self, scale):
            self.scale, self.rows = scale, 0

        def __call__(self, t):
            self.rows += t.shape[0]
            return t * self.scale

    for _ in range(1000):
        e = int(r.integers(1, 8))
        k = int(r.integers(1, e + 1))
        logits = r.normal(size=(3, e)) * 3
        g = GatingVector(Tensor(logits), k)
        sum_err = max(sum_err, float(np.abs(g.weights().data.sum(axis=1) - 1).max()))
        experts = [Counting(float(s)) for s in r.normal(size=e)]
        layer = TarmLayer(experts)
        x = Tensor(r.normal(size=(3, 2)))
        out = tarm_forward(x, g, layer)
        wrong_k += int(sum(ex.rows for ex in experts) != 3 * k)
        if k == 1:
            sel = g.selection()[:, 0]
            not_bitwise += int(not all(np.array_equal(out.data[i], experts[s](x[i:i + 1]).data[0])
                                       for i, s in enumerate(sel)))
        c, b = float(2.0 ** r.integers(-4, 5)), float(r.integers(-5, 6))
        affine_bad += int(not route_argmax_invariance_check(GatingVector(Tensor(np.round(logits[:1], 2)), k), c, b))
    ok = sum_err <= 1e-9 and wrong_k == 0 and not_bitwise == 0 and affine_bad == 0
    verdict("gating contract", ok, f"1000 trials, simplex err {sum_err:.1e}, wrong k {wrong_k}, "
                                   f"k=1 mismatches {not_bitwise}, affine failures {affine_bad}")


def test_metric_oracles(verdict):
    r = stream(0, "acceptance", "metrics")
    ident_err = self_bad = 0.0
    for _ in range(200):
        peak = float(r.uniform(0.5, 255))
        a, b = r.random((16, 16)) * peak, r.random((16, 16)) * peak
        ident_err = max(ident_err, abs(psnr(a, b, peak) - (20 * math.log10(peak) - 20 * math.log10(rmse(a, b)))))
        self_bad += ssim(a, a, peak=peak) != 1.0
    const_err = max(abs(ssim(np.full((16, 16), x), np.full((16, 16), y)) - ssim_constant(x, y))
                    for x, y in r.random((50, 2)))
    ok = ident_err <= 1e-10 and self_bad == 0 and const_err <= 1e-9
    verdict("metric oracles", ok,
            f"psnr/rmse identity err {ident_err:.1e}, ssim(a,a) != 1 in {int(self_bad)} cases, "
            f"constant-image err {const_err:.1e}")


def test_ablation_ordering(verdict, capsys):
    config = load_config(BENCHMARK, environ={})
    report = run_ablation(config, seeds=(0, 1, 2))
    with capsys.disabled():
        print("\n" + report.to_tsv())
    lines = []
    for s in report.seeds:
        avgs = ", ".join(f"{v} {report.average(s, v):.3f}" for v in ORDER)
        lines.append(f"seed {s}: {avgs}; single {report.average(s, 'single-codebook'):.3f}; "
                     f"ordering {'ok' if report.ordering_holds(s) else 'no'}, "
                     f"bank {'ok' if report.bank_beats_single(s) else 'no'}")
    with capsys.disabled():
        print("\n".join(lines))
    ordering = report.majority(report.ordering_holds)
    bank = report.majority(report.bank_beats_single)
    in_budget = report.seconds <= 1800
    verdict("ablation ordering", ordering and bank and in_budget,
            f"ordering majority {ordering}, bank-over-single majority {bank}, {report.seconds / 60:.1f} min")


def test_determinism(verdict, tiny_config, tmp_path):
    out = tmp_path / "run"
    cfg = tiny_config.replace(out_dir=str(out))
    hashes, reports = [], []
    for name in ("first", "second"):
        data = load_data(cfg)
        s1 = train_stage1(cfg, data, out)
        s2 = train_stage2(cfg, s1, data, out)
        s3 = train_stage3(cfg, s1, s2, data, out)
        reports.append(evaluate_prediction(infer(cfg, s1, s2, s3, data["test"]), data["test"]).to_tsv())
        hashes.append([file_hash(out / f) for f in ("stage1.ckpt", "bank.dcb", "stage2.ckpt", "stage3.ckpt")])
        out.rename(tmp_path / name)
    ok = hashes[0] == hashes[1] and reports[0] == reports[1]
    verdict("determinism", ok, f"{len(hashes[0])} checkpoint files and the metric report compared byte for byte")
