"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line summary; conftest prints a PASS/FAIL line per
criterion at the end of the run.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from modelbridge import experiment as ex
from modelbridge.autodiff import grad_check
from modelbridge.bridge import BridgeShapeSpec, bridge_forward, bridge_param_count, full_rank_param_count, init_bridge
from modelbridge.cka import cka_linear, gram, hsic
from modelbridge.data import DEFAULT_NEW_MODALITY, DEFAULT_OLD_MODALITY
from modelbridge.metrics import balanced_accuracy, f1_scores
from modelbridge.models import EncoderModel, TaskHead, build_encoder, conv_spec
from modelbridge.probing import select_input_position
from modelbridge.transfer import alignment_loss, prefix_reps, suffix_logits

ROOT = Path(__file__).resolve().parent.parent
RANDOM_3CLASS = 1 / 3


def double_sum_hsic(kt, ks):
    n = len(kt)
    row = [sum(kt[i][j] for j in range(n)) / n for i in range(n)]
    col = [sum(kt[i][j] for i in range(n)) / n for j in range(n)]
    grand = sum(row) / n
    return sum((kt[i][j] - row[i] - col[j] + grand) * ks[j][i] for i in range(n) for j in range(n)) / n**2


def naive_scores(y_true, y_pred):
    classes = sorted(set(y_true) | set(y_pred))
    recalls, f1s, supports = [], [], []
    for c in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        if tp + fn:
            recalls.append(tp / (tp + fn))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        supports.append(tp + fn)
    return (sum(recalls) / len(recalls), sum(f1s) / len(f1s),
            sum(f * s for f, s in zip(f1s, supports)) / sum(supports))


def orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def test_criterion_1_cka_oracle(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_hsic = worst_inv = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        a = rng.standard_normal((n, int(rng.integers(1, 6))))
        b = rng.standard_normal((n, int(rng.integers(1, 6))))
        kt, ks = gram(a), gram(b)
        worst_hsic = max(worst_hsic, abs(hsic(kt, ks) - double_sum_hsic(kt.tolist(), ks.tolist())))
        if n >= 3:
            base = cka_linear(a, b)
            worst_inv = max(worst_inv, abs(cka_linear(a, a) - 1),
                            abs(cka_linear(a @ orthogonal(rng, a.shape[1]), b) - base),
                            abs(cka_linear(a, 7.3 * b) - base))
    elapsed = time.perf_counter() - start
    detail(f"max HSIC gap {worst_hsic:.1e}, max invariance gap {worst_inv:.1e}, {elapsed:.2f}s")
    assert worst_hsic < 1e-10
    assert worst_inv < 1e-9
    assert elapsed < 5


def test_criterion_2_gradient_suite(detail):
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         str(ROOT / "tests" / "test_autodiff.py"), str(ROOT / "tests" / "test_bridge.py"), "-k", "gradient"],
        capture_output=True, text=True, cwd=ROOT)
    # the bridge-through-frozen-suffix loss on the default encoder architectures
    rng = np.random.default_rng(7)
    old = build_encoder("attention", DEFAULT_OLD_MODALITY.input_shape, "ecg", seed=1)
    new = build_encoder("conv", DEFAULT_NEW_MODALITY.input_shape, "ppg", seed=2)
    old.freeze()
    new.freeze()
    m, l = 2, 1
    x_old = rng.standard_normal((2,) + DEFAULT_OLD_MODALITY.input_shape)
    x_new = rng.standard_normal((2,) + DEFAULT_NEW_MODALITY.input_shape)
    h_new = prefix_reps(new, x_new, m)
    target = prefix_reps(old, x_old, old.layer_count)
    n_out, d_out = old.layer_shapes()[l - 1]
    spec = BridgeShapeSpec(h_new.shape[-1], n_out, d_out, rank=2, n_prototypes=4)
    bridge = init_bridge(spec, "prototype-from-old", prefix_reps(old, x_old, l), seed=3)

    def loss():
        return alignment_loss(target, old.forward_suffix(bridge_forward(h_new, bridge), l))

    err = grad_check(loss, bridge.parameters(), eps=1e-5)
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    detail(f"primitive suite: {summary}; bridge-through-suffix rel err {err:.1e}; {elapsed:.1f}s")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert err < 1e-4
    assert elapsed < 60


def test_criterion_3_perfect_bridge_implication(detail):
    start = time.perf_counter()
    old = build_encoder("attention", DEFAULT_OLD_MODALITY.input_shape, "ecg", seed=11)
    new = build_encoder("conv-wide", DEFAULT_NEW_MODALITY.input_shape, "ppg", seed=12)
    assert old.layer_count == new.layer_count == 4
    head = TaskHead(old.layer_shapes()[-1][1], 3, seed=13)
    rng = np.random.default_rng(14)
    x_old = rng.standard_normal((16,) + DEFAULT_OLD_MODALITY.input_shape)
    x_new = rng.standard_normal((16,) + DEFAULT_NEW_MODALITY.input_shape)
    teacher = head(old.forward(x_old)).data
    checked = 0
    for m in range(1, 5):
        h_m = new.forward_prefix(x_new, m).data
        for l in range(1, 5):
            h_l = old.forward_prefix(x_old, l).data
            n_out, d_out = old.layer_shapes()[l - 1]
            bridge = init_bridge(BridgeShapeSpec(h_m.shape[-1], n_out, d_out, 2, 4), "random", seed=m * 10 + l)
            assert bridge_forward(h_m, bridge).shape == h_l.shape
            bridged = suffix_logits(old, head, h_l, l)
            assert bridged.tobytes() == teacher.tobytes(), (m, l)
            assert (bridged.argmax(axis=1) == teacher.argmax(axis=1)).all()
            checked += 1
    elapsed = time.perf_counter() - start
    detail(f"{checked} (m, l) pairs bit-exact, {elapsed:.2f}s")
    assert checked == 16
    assert elapsed < 30


def test_criterion_4_parameter_efficiency(default_run, detail):
    dims = dict(d_in=200, n_out=93, d_out=512)
    full = full_rank_param_count(BridgeShapeSpec(**dims, rank=1, n_prototypes=1), 181)
    worst = max(bridge_param_count(BridgeShapeSpec(**dims, rank=r, n_prototypes=n))
                for r in range(1, 33) for n in range(1, 301))
    report, _ = default_run
    checks = report.checks
    detail(f"full rank {full:,}, worst grid share {worst / full:.4%}, "
           f"bridge/KD params {checks['bridge_params']}/{checks['kd_student_params']} "
           f"= {checks['bridge_to_kd_param_ratio']:.3f}")
    assert full == 1_723_699_200
    assert worst / full < 0.02
    assert checks["param_budget_ok"] is True
    assert checks["bridge_to_kd_param_ratio"] < 0.15


def test_criterion_5_end_to_end_transfer(default_run, detail):
    report, seconds = default_run
    oracle = report.row("oracle").bacc_mean
    bridge = report.row("bridge").bacc_mean
    kdc = report.row("kd-contrast").bacc_mean
    detail(f"oracle {oracle:.4f}, bridge {bridge:.4f}, kd-contrast {kdc:.4f}, "
           f"kd {report.row('kd').bacc_mean:.4f}, random {report.row('random').bacc_mean:.4f}, {seconds:.0f}s")
    assert report.row("bridge").seeds == [0, 1, 2, 3, 4]
    assert oracle >= 0.85
    assert bridge - RANDOM_3CLASS >= 0.20
    assert oracle - bridge <= 0.10
    assert bridge >= kdc - 0.02
    assert seconds < 600


def planted_model():
    eye = {"weight": np.eye(2).reshape(1, 2, 2), "bias": np.zeros(2)}
    specs = [conv_spec(2, 2, 1, norm=False, activation="relu" if i == 2 else "none") for i in range(4)]
    return EncoderModel(specs, (4, 2), "planted", params=[eye] * 4)


def test_criterion_6_position_selection(default_cfg, default_contexts, default_run, detail):
    # stage 1: the only layer whose pooled output separates the classes is layer 3
    rng = np.random.default_rng(0)
    y = np.arange(60) % 2
    x = np.zeros((60, 4, 2))
    x[np.arange(60), :, y] = rng.uniform(1.5, 2.5, 60)[:, None] * np.array([1, -1, 1, -1])
    probe = select_input_position(planted_model(), x, y)
    # stage 2: subsampled selection against full-matrix CKA on every seed
    mismatches = []
    for seed, ctx in sorted(default_contexts.items()):
        sel = ex.select_positions(default_cfg, ctx)
        pair = ctx.splits.pair
        h_new = prefix_reps(ctx.new, pair.x_new, sel.m)
        full = {l: cka_linear(h_new, prefix_reps(ctx.old, pair.x_old, l)) for l in range(1, ctx.old.layer_count + 1)}
        if max(full, key=full.get) != sel.l:
            mismatches.append(seed)
    ablation = ex.fixed_position_ablation(default_cfg, default_contexts)
    gap = ablation.checks["selected_minus_fixed_average"]
    detail(f"planted m={probe.m} score {probe.scores[probe.m]}, CKA mismatches {mismatches}, "
           f"selected {ablation.row('bridge[selected]').bacc_mean:.4f} vs fixed-average "
           f"{ablation.row('fixed-average').bacc_mean:.4f}")
    assert probe.m == 3 and probe.scores[3] == 1.0
    assert not mismatches
    assert len(ablation.rows) == 11
    assert gap >= -0.01


def test_criterion_7_pair_fraction(default_cfg, default_contexts, default_run, detail):
    start = time.perf_counter()
    report = ex.pair_fraction_ablation(default_cfg, default_contexts)
    elapsed = time.perf_counter() - start
    full, fifth = report.row("bridge[pair=1]").bacc_mean, report.row("bridge[pair=0.2]").bacc_mean
    detail(f"fraction 1.0 {full:.4f}, fraction 0.2 {fifth:.4f}, {elapsed:.0f}s")
    assert abs(full - fifth) <= 0.04
    assert elapsed < 900


def test_criterion_8_metric_oracle(detail):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(1000):
        n, k = int(rng.integers(1, 50)), int(rng.integers(2, 6))
        y, p = rng.integers(0, k, n).tolist(), rng.integers(0, k, n).tolist()
        bacc, macro, weighted = naive_scores(y, p)
        f1m, f1w, _ = f1_scores(y, p)
        mismatches += (balanced_accuracy(y, p), f1m, f1w) != (bacc, macro, weighted)
    hand = balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1]), f1_scores([0, 0, 1, 1], [0, 1, 1, 1])[0]
    detail(f"{mismatches} mismatches in 1000 instances; hand case BAcc {hand[0]}, F1-macro {hand[1]:.4f}")
    assert mismatches == 0
    assert hand[0] == 0.75 and round(hand[1], 4) == 0.7333


def test_criterion_9_determinism(default_cfg, tmp_path, detail):
    cfg = default_cfg.with_run(seeds=1)
    outputs = []
    for i in range(2):
        report = ex.run_experiment(cfg)  # fresh data and pretraining every time
        ex.export_report(report, tmp_path / f"run{i}")
        outputs.append({name: (tmp_path / f"run{i}" / name).read_bytes()
                        for name in ("report.jsonl", "report.csv", "report.txt")})
    same = [name for name in outputs[0] if outputs[0][name] == outputs[1][name]]
    detail(f"identical files: {', '.join(same)}")
    assert len(same) == 3
    assert ex.report_to_jsonl(ex.report_from_jsonl(outputs[0]["report.jsonl"].decode())).encode() == \
        outputs[0]["report.jsonl"]
