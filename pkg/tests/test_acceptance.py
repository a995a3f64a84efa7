"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the run (see ``conftest.pytest_terminal_summary``). The benchmark
criteria (5, 6, 8, 9, 10) share one session cache of datasets and trained
networks, so the whole file takes about 12 minutes on one CPU core.
"""

import json
import time

import numpy as np
import pytest

from sall import autodiff as ad
from sall import calibration as cal
from sall import cli
from sall import experiments as exp
from sall import interpretability as interp
from sall import network as net
from sall import pipeline as pl
from sall import synthetic as syn
from sall.autodiff import Tape, Tensor
from sall.network import Conv, GlobalAvgPool, NetworkSpec, ReLU

from oracles import check_gradients, leaf

RESULTS = []

# desk-scale benchmark: 2 tasks, overlap 0.6, 3x64x64, 300 generated per grade
# (150 train after the split), 3 seeds, T = 3
BENCH = exp.ExperimentConfig(tasks=("dr", "amd"), overlap=0.6, n_per_grade=300, image_size=64,
                             train={"temperature": 3.0}, ablation_T=(3.0,), seeds=(0, 1, 2))
NTASK = BENCH.with_overrides(["tasks=[dr, amd, arter]"])


def record(n, title, ok, detail=""):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def cache():
    return {}


@pytest.fixture(scope="module")
def ablation(cache):
    return exp.run_ablation(BENCH, exp.Bench(BENCH, cache), cells=("baseline", "labels", "sall"))


# --------------------------------------------------------------- criterion 1


def test_c01_gradient_correctness(rng):
    t0 = time.time()
    worst = {}

    def check(name, build, leaves):
        worst[name] = max(worst.get(name, 0.0), check_gradients(build, leaves, eps=1e-5))

    for _ in range(10):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        w = Tensor(rng.normal(size=(3, 2)))
        check("matmul", lambda: ad.tensor_sum(ad.mul(ad.matmul(a, b), w)), [a, b])
        for stride, pad in ((1, 0), (1, 1), (2, 1)):
            x, k = leaf(rng.normal(size=(2, 2, 5, 5))), leaf(rng.normal(size=(3, 2, 3, 3)))
            wc = Tensor(rng.normal(size=ad.conv2d(x, k, stride, pad).shape))
            check("conv2d", lambda: ad.tensor_sum(ad.mul(ad.conv2d(x, k, stride, pad), wc)), [x, k])
        v = rng.normal(size=30)
        v[np.abs(v) < 1e-3] = 0.5
        r, wr = leaf(v), Tensor(rng.normal(size=30))
        check("relu", lambda: ad.tensor_sum(ad.mul(ad.relu(r), wr)), [r])
        z, ws = leaf(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 5)))
        T = float(rng.uniform(0.5, 8))
        check("softmax_t", lambda: ad.tensor_sum(ad.mul(ad.softmax_t(z, T), ws)), [z])
        zc, y = leaf(rng.normal(size=(4, 3)) * 2), rng.dirichlet(np.ones(3), size=4)
        check("cross_entropy_soft", lambda: ad.cross_entropy_soft(zc, y, T), [zc])
        mp, wm = leaf(rng.normal(size=(2, 3, 6, 6))), Tensor(rng.normal(size=(2, 3, 3, 3)))
        check("maxpool2d", lambda: ad.tensor_sum(ad.mul(ad.maxpool2d(mp, 2), wm)), [mp])
        g, wg = leaf(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 3)))
        check("global_avg_pool", lambda: ad.tensor_sum(ad.mul(ad.global_avg_pool(g), wg)), [g])
        cb, bias = leaf(rng.normal(size=(2, 3, 4, 4))), leaf(rng.normal(size=3))
        wb = Tensor(rng.normal(size=(2, 3, 4, 4)))
        check("channel_bias", lambda: ad.tensor_sum(ad.mul(ad.channel_bias(cb, bias), wb)), [cb, bias])
        ad1, ad2 = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))
        wa = Tensor(rng.normal(size=(3, 4)))
        check("add/scale", lambda: ad.tensor_sum(ad.mul(ad.scale(ad.add(ad1, ad2), 1.7), wa)), [ad1, ad2])
        tr, wt = leaf(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(2, 3)))
        check("take_rows", lambda: ad.tensor_sum(ad.mul(ad.take_rows(tr, [4, 1]), wt)), [tr])

        # the full composite network, every parameter
        spec = net.default_spec([("a", 3), ("b", 2)], input_shape=(3, 12, 12), width=3, feature_dim=6)
        params = net.init_params(spec, int(rng.integers(1 << 30)))
        for name in params.names():
            if name.endswith("bias"):  # zero biases on dead units sit exactly on a ReLU kink
                params.values[name] = rng.normal(0.0, 0.1, params.values[name].shape)
        bound = net.bind(params)
        images = rng.random((2, 3, 12, 12))
        ya, yb = rng.dirichlet(np.ones(3), size=2), rng.dirichlet(np.ones(2), size=2)

        def network_loss():
            out = net.forward(bound, spec, images)
            return ad.add(ad.cross_entropy_soft(out["a"], ya, 2.0), ad.cross_entropy_soft(out["b"], yb, 1.0))
        check("network", network_loss, list(bound.values()))
    elapsed = time.time() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    record(1, "gradient correctness", ok, f"max rel err {max(worst.values()):.1e}, {elapsed:.0f}s")
    assert ok, worst


# --------------------------------------------------------------- criterion 2


def test_c02_softmax_temperature_laws(rng):
    grid = (1, 2, 3, 5, 10, 50)
    failures = 0
    for _ in range(1000):
        z = rng.normal(size=int(rng.integers(2, 13))) * rng.uniform(0.1, 5)
        c = rng.uniform(-100, 100)
        top = np.argmax(z)
        for T in grid + (float(rng.uniform(1e-3, 1e3)),):
            p = ad.softmax_array(z, T)
            failures += abs(p.sum() - 1) > 1e-12
            failures += not np.allclose(ad.softmax_array(z + c, T), p, rtol=0, atol=1e-12)
            failures += np.argmax(p) != top
        maxes = [ad.softmax_array(z, T).max() for T in grid]
        failures += any(b > a for a, b in zip(maxes, maxes[1:]))
        failures += np.abs(ad.softmax_array(z, 1e4) - 1 / len(z)).max() >= 1e-3
    record(2, "softmax/temperature laws over 1000 vectors", failures == 0, f"{failures} violations")
    assert failures == 0


# --------------------------------------------------------------- criterion 3


def test_c03_loss_and_gradient_additivity(monkeypatch):
    tasks = [syn.GradedTaskSpec("a", (syn.HEMORRHAGE, syn.DRUSEN), ((0, 0), (2, 1), (5, 2))),
             syn.GradedTaskSpec("b", (syn.DRUSEN,), ((0,), (3,))),
             syn.GradedTaskSpec("c", (syn.VESSEL,), ((0,), (2,), (4,)))]
    real = pl.loss_and_grads
    worst_grad = [0.0]
    steps = [0]

    def checked(params, spec, images, batch, config, use_soft=True, heads=None):
        per, total, grads = real(params, spec, images, batch, config, use_soft, heads)
        if heads is None:
            parts = [real(params, spec, images, batch, config, use_soft, [t])[2] for t in per]
            for name in params.trunk_names():
                diff = np.abs(grads[name] - sum(p[name] for p in parts)).max()
                worst_grad[0] = max(worst_grad[0], diff)
            steps[0] += 1
        return per, total, grads

    monkeypatch.setattr(pl, "loss_and_grads", checked)
    worst_loss = 0.0
    for n in (2, 3):
        use = tasks[:n]
        data = {t.task_id: syn.generate_dataset(t, syn.OverlapSpec(), [6] * t.K, 16, seed=n) for t in use}
        for t in use:
            s = net.default_spec([(t.task_id, t.K)], input_shape=(3, 16, 16), width=4, feature_dim=8)
            p = net.init_params(s, 7)
            for o in use:
                if o is not t:
                    pl.generate_synergic_labels(p, s, t.task_id, data[o.task_id], 3.0)
        spec = net.default_spec([(t.task_id, t.K) for t in use], input_shape=(3, 16, 16), width=4, feature_dim=8)
        res = pl.train_multitask(data, spec, pl.TrainConfig(epochs=3, batch_size=8, temperature=3.0))
        for i, total in enumerate(res.total_losses):
            worst_loss = max(worst_loss, abs(total - sum(res.head_losses[t][i] for t in spec.task_ids)))
    ok = worst_loss <= 1e-10 and worst_grad[0] <= 1e-10 and steps[0] > 0
    record(3, "loss and trunk-gradient additivity (2 and 3 tasks)", ok,
           f"{steps[0]} steps, loss gap {worst_loss:.1e}, grad gap {worst_grad[0]:.1e}")
    assert ok


# --------------------------------------------------------------- criterion 4


def test_c04_degenerate_reduction():
    task, ov = syn.benchmark_tasks()[0]
    data = syn.generate_dataset(task, ov, [6] * task.K, 32, seed=4)
    spec = net.default_spec([("dr", task.K)], input_shape=(3, 32, 32), width=4, feature_dim=8)
    cfg = pl.TrainConfig(epochs=3, batch_size=8, seed=4)
    single = pl.pretrain_single(data, spec, cfg)
    multi = pl.train_multitask({"dr": data}, spec, cfg, use_soft=False)
    ok = single.total_losses == multi.total_losses and single.params.fingerprint() == multi.params.fingerprint()
    record(4, "one head without soft labels reproduces single-task training bitwise", ok,
           f"{len(single.total_losses)} steps")
    assert ok


# --------------------------------------------------------------- criterion 5


def test_c05_ablation_direction(ablation):
    base = ablation.find("baseline", T=3.0)["mean"]
    sall = ablation.find("sall", T=3.0)["mean"]
    labels = ablation.find("labels", T=3.0)["mean"]
    gain = {t: sall[t]["accuracy"] - base[t]["accuracy"] for t in BENCH.tasks}
    label_gain = {t: labels[t]["accuracy"] - base[t]["accuracy"] for t in BENCH.tasks}
    ok = all(gain[t] >= 0.01 for t in BENCH.tasks) and all(label_gain[t] <= gain[t] for t in BENCH.tasks)
    detail = ", ".join(f"{t}: base {base[t]['accuracy']:.4f} sall {gain[t]:+.4f} labels-only {label_gain[t]:+.4f}"
                       for t in BENCH.tasks)
    record(5, "SALL beats single-task baseline by >= 1 point on both tasks", ok, detail)
    assert ok


# --------------------------------------------------------------- criterion 6


def test_c06_label_stats_soften(cache):
    bench = exp.Bench(BENCH, cache)
    ok, parts = True, []
    for seed in BENCH.seeds:
        for src, dst in (("dr", "amd"), ("amd", "dr")):
            params, spec = bench.baseline(src, seed)
            inputs = bench.train_sets(seed)[dst]
            s1 = pl.label_stats(pl.generate_synergic_labels(params, spec, src, inputs, 1.0, attach=False))
            s3 = pl.label_stats(pl.generate_synergic_labels(params, spec, src, inputs, 3.0, attach=False))
            ok &= s3.mean_max < s1.mean_max and s3.mean_variance < s1.mean_variance
            if seed == BENCH.seeds[0]:
                parts.append(f"{src}->{dst} T1 {s1.mean_max:.3f}/{s1.mean_variance:.4f} "
                             f"T3 {s3.mean_max:.3f}/{s3.mean_variance:.4f}")
    record(6, "label mean_max and mean_variance smaller at T=3 than T=1", ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------- criterion 7


def test_c07_calibration():
    rng = np.random.default_rng(7)
    P = rng.dirichlet(np.full(4, 0.5), size=50_000)
    y = (rng.random(50_000)[:, None] > np.cumsum(P, axis=1)).sum(axis=1)  # true class drawn from P
    diagram = cal.reliability_diagram(cal.records_from(P, y), 10)
    gaps = [abs(b.accuracy - b.mean_conf) for b in diagram.bins if b.count >= 1000]
    e = cal.ece(diagram)
    exact = True
    for _ in range(100):
        n, K = int(rng.integers(1, 12)), int(rng.integers(2, 6))
        recs = cal.records_from(rng.dirichlet(np.ones(K), size=n), rng.integers(0, K, size=n))
        good = [float(r.probabilities.max()) for r in recs if int(np.argmax(r.probabilities)) == r.true_class]
        bad = [float(r.probabilities.max()) for r in recs if int(np.argmax(r.probabilities)) != r.true_class]
        oracle = (float(np.mean(good)) if good else None, float(np.mean(bad)) if bad else None, len(good) / n)
        exact &= cal.confidence_error(recs) == oracle
    ok = max(gaps) < 0.02 and e < 0.02 and exact
    record(7, "calibration on a perfectly calibrated source", ok,
           f"worst bin gap {max(gaps):.4f} over {len(gaps)} bins, ECE {e:.4f}, oracle match {exact}")
    assert ok


# --------------------------------------------------------------- criterion 8


def test_c08_extreme_confusions(ablation):
    base = sum(exp.extreme_confusions(ablation.confusion_sum("baseline", t, T=3.0)) for t in BENCH.tasks)
    sall = sum(exp.extreme_confusions(ablation.confusion_sum("sall", t, T=3.0)) for t in BENCH.tasks)
    ok = sall < base
    record(8, "SALL reduces grade-0 <-> top-grade confusions", ok, f"baseline {base}, sall {sall} over 3 seeds")
    assert ok


# --------------------------------------------------------------- criterion 9


def test_c09_grad_cam(cache, ablation):
    # closed form: one 1x1 identity channel and a spatial-mean head
    spec1 = NetworkSpec((1, 8, 8), (Conv("probe", 1, kernel=1, padding=0), ReLU(), GlobalAvgPool()), (("t", 2),))
    p1 = net.init_params(spec1, 0)
    p1.values["trunk.probe.weight"] = np.ones((1, 1, 1, 1))
    p1.values["head.t.weight"] = np.array([[1.0, 0.0]])
    img = np.random.default_rng(9).integers(-3, 9, size=(1, 8, 8)).astype(float)
    img[0, 2, 6] = 16.0
    h1 = interp.grad_cam(p1, spec1, img, "t", class_index=0)
    closed = np.array_equal(h1.native, np.maximum(img[0], 0) / 16.0)

    # cross-task query: severe first-task images through the second task's head
    bench = exp.Bench(BENCH, cache)
    seed = BENCH.seeds[0]
    params, spec = bench.cell("sall", seed, 3.0)["amd"]
    (dr, _), (amd, ov) = bench.task_pairs()
    shared = set(syn.resolve_kinds(amd, ov)) & set(dr.kinds)
    severe = [e for e in bench.splits(seed)["dr"][2] if e.grade == dr.K - 1][:20]
    wins = 0
    for ex in severe:
        inside, outside = interp.mask_contrast(interp.grad_cam(params, spec, ex.image, "amd"), ex.lesion_mask(shared))
        wins += inside > outside
    ok = closed and wins >= 16 and len(severe) == 20
    record(9, "Grad-CAM closed form and cross-task lesion concentration", ok,
           f"closed form {closed}, {wins}/20 images concentrate on {sorted(shared)}")
    assert ok


# -------------------------------------------------------------- criterion 10


def test_c10_small_data_three_tasks(cache):
    table = exp.run_ntask(NTASK, exp.Bench(NTASK, cache), caps=(1500,))
    base = table.find("baseline", cap=1500)["mean"]
    sall = table.find("sall", cap=1500)["mean"]
    gain = {t: sall[t]["accuracy"] - base[t]["accuracy"] for t in NTASK.tasks}
    ok = gain["dr"] > 0 and gain["amd"] > 0
    record(10, "3-task SALL beats single-task baselines at the small per-class cap", ok,
           ", ".join(f"{t} {g:+.4f}" for t, g in gain.items()) + f" (cap 1500 x {NTASK.cap_scale})")
    assert ok


# -------------------------------------------------------------- criterion 11


TINY = """\
tasks: [dr, amd]
n_per_grade: 8
image_size: 16
width: 4
feature_dim: 8
train: {epochs: 1, batch_size: 16}
ablation_T: [1.0, 3.0]
t_grid: [1.0, 3.0]
ratio_grid: [0.5, 1.0]
caps: [20]
seeds: [0, 1]
gradcam_images: 2
"""


def test_c11_cli_determinism(tmp_path):
    config = tmp_path / "tiny.yaml"
    config.write_text(TINY)
    verbs = list(cli.VERBS)
    runs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        metrics = {}
        for verb in verbs:
            extra = ["--override", "tasks=[dr, amd, arter]"] if verb == "ntask" else []
            assert cli.main([verb, "--config", str(config), "--out", str(out), *extra]) == 0, verb
            metrics[verb] = (out / "metrics" / f"{verb}.json").read_bytes()
        runs.append(metrics)
    same = [v for v in verbs if runs[0][v] == runs[1][v]]
    ok = len(same) == len(verbs)
    record(11, "every CLI verb re-run reproduces its metrics bitwise", ok, f"{len(same)}/{len(verbs)} verbs identical")
    assert ok
