"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The training-based checks
(6-9) dominate the runtime (roughly 25 minutes on one CPU core); everything
is seeded, so outcomes are reproducible bit-for-bit on a given platform.
"""

import json
import time

import numpy as np
import pytest

import sleepstager as ss
from sleepstager.cli import main as cli_main
from sleepstager.experiments import (
    METHOD_PT,
    METHOD_SCRATCH,
    SweepSpec,
    run_label_efficiency,
    run_pretrain_scaling,
)
from sleepstager.trainer import build_dataset, pretext_eval

TINY = ss.ModelConfig(patch_len=5, n_tokens=9, d_model=16, depth=2, n_heads=2,
                      d_ff=32, dropout=0.0, n_positions=9, n_classes=5)

SMALL_D64 = ss.ModelConfig(patch_len=30, n_tokens=101, d_model=64, depth=2,
                           n_heads=4, d_ff=128, dropout=0.1, n_positions=101,
                           n_classes=5)


def report(num, ok, detail):
    print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'} -- {detail}")
    assert ok, f"criterion {num} failed: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient correctness against central finite differences
# ---------------------------------------------------------------------------


def test_c01_gradient_correctness():
    t0 = time.time()
    params = ss.init_params(TINY, seed=7, dtype=np.float64)
    rng = np.random.default_rng(11)
    x1, x2 = rng.normal(size=(9, 5)), rng.normal(size=(9, 5))
    pre_batch = [
        ss.make_pretext_batch(x1, keep_ratio=0.4, mask_ratio=0.2, seed=5),
        ss.make_pretext_batch(x2, keep_ratio=0.4, mask_ratio=0.2, seed=6),
    ]
    stage_batch = ss.StageBatch(np.stack([x1, x2]), np.array([1, 4]))
    weights = ss.class_weights([3, 4, 5, 6, 7])
    step = 1e-5

    def max_rel_err(objective, batch, **kw):
        _, grads = ss.loss_and_gradients(params, batch, objective, **kw)
        worst = 0.0
        for name, arr in params.tensors.items():
            flat = arr.ravel()
            g = grads[name].ravel()
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + step
                lp, _ = ss.loss_and_gradients(params, batch, objective, **kw)
                flat[i] = old - step
                lm, _ = ss.loss_and_gradients(params, batch, objective, **kw)
                flat[i] = old
                fd = (lp - lm) / (2 * step)
                # the 1e-5 denominator floor guards identically-zero gradients
                # (e.g. key-projection biases), where central differences
                # return pure cancellation noise
                worst = max(worst, abs(fd - g[i]) / max(1e-5, abs(fd), abs(g[i])))
        return worst

    err_p = max_rel_err("pretext", pre_batch)
    err_s = max_rel_err("stage", stage_batch, class_weights=weights)
    elapsed = time.time() - t0
    ok = err_p < 1e-5 and err_s < 1e-5 and elapsed < 120
    report(1, ok, f"max rel grad err pretext {err_p:.2e}, stage {err_s:.2e} "
                  f"(< 1e-05), {elapsed:.0f}s (< 120s)")


# ---------------------------------------------------------------------------
# 2. parameter count versus the published total
# ---------------------------------------------------------------------------


def test_c02_parameter_count():
    n = ss.count_parameters(ss.ModelConfig())
    target = 18_986_661
    rel = abs(n - target) / target
    # decomposition (documented in count_parameters): embedding 15,872 +
    # 6 x 3,152,384 + final norm 1,024 + position head 51,813 + stage head 2,565
    ok = rel < 0.005 and n == 18_985_578
    report(2, ok, f"count {n:,} vs {target:,} (rel diff {rel:.2e} < 5e-3)")


# ---------------------------------------------------------------------------
# 3. permutation equivariance of the encoder
# ---------------------------------------------------------------------------


def test_c03_permutation_equivariance():
    t0 = time.time()
    cfg = ss.ModelConfig(patch_len=8, n_tokens=32, d_model=64, depth=2, n_heads=4,
                         d_ff=128, dropout=0.0, n_positions=32, n_classes=5)
    params = ss.init_params(cfg, seed=3)  # float32
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(32, 8)).astype(np.float32)
        perm = rng.permutation(32)
        out = ss.encode(params, x)
        out_perm = ss.encode(params, x[perm])
        worst = max(worst, float(np.abs(out[perm] - out_perm).max()))
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 60
    report(3, ok, f"100 trials, max abs diff {worst:.2e} (< 1e-4), {elapsed:.0f}s (< 60s)")


# ---------------------------------------------------------------------------
# 4. pretext construction fidelity over 10,000 batches
# ---------------------------------------------------------------------------


def test_c04_pretext_construction():
    t0 = time.time()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(101, 30)).astype(np.float32)
    want = np.arange(101)
    ok = True
    for seed in range(10_000):
        b = ss.make_pretext_batch(x, keep_ratio=0.5, mask_ratio=0.0, seed=seed)
        if not np.array_equal(np.sort(b.position_labels), want):
            ok = False
            break
        if int(b.pe_visibility.sum()) != 51:  # round(0.5 * 101)
            ok = False
            break
        if not b.key_mask.all():  # mask ratio 0 leaves every key visible
            ok = False
            break
    elapsed = time.time() - t0
    ok = ok and elapsed < 60
    report(4, ok, f"10,000 batches: labels always a permutation, 51 visible, "
                  f"all keys kept, {elapsed:.0f}s (< 60s)")


# ---------------------------------------------------------------------------
# 5. metrics against brute-force recomputation
# ---------------------------------------------------------------------------


def brute_force(preds, labels):
    n = len(labels)
    cm = [[0] * 5 for _ in range(5)]
    for p, y in zip(preds, labels):
        cm[y][p] += 1
    recalls = [cm[c][c] / sum(cm[c]) for c in range(5) if sum(cm[c])]
    bal = sum(recalls) / len(recalls)
    acc = sum(cm[c][c] for c in range(5)) / n
    p_e = sum(sum(cm[c]) * sum(cm[r][c] for r in range(5)) for c in range(5)) / n**2
    kappa = 0.0 if p_e == 1.0 else (acc - p_e) / (1.0 - p_e)
    f1s = []
    for c in range(5):
        col = sum(cm[r][c] for r in range(5))
        row = sum(cm[c])
        prec = cm[c][c] / col if col else 0.0
        rec = cm[c][c] / row if row else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return bal, acc, kappa, f1s, sum(f1s) / 5


def test_c05_metrics_oracle():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        preds = rng.integers(0, 5, n)
        labels = rng.integers(0, 5, n)
        rep = ss.compute_report(ss.confusion(preds, labels))
        bal, acc, kappa, f1s, macro = brute_force(preds.tolist(), labels.tolist())
        worst = max(
            worst,
            abs(rep.balanced_accuracy - bal),
            abs(rep.accuracy - acc),
            abs(rep.kappa - kappa),
            abs(rep.macro_f1 - macro),
            float(np.abs(np.array(rep.per_class_f1) - np.array(f1s)).max()),
        )

    def embed(block):
        cm = np.zeros((5, 5), dtype=np.int64)
        cm[:2, :2] = block
        return cm

    hand_ok = (
        abs(ss.balanced_accuracy(embed([[9, 1], [4, 6]])) - 0.75) < 1e-15
        and abs(ss.cohens_kappa(embed([[20, 5], [10, 15]])) - 0.4) < 1e-15
        and abs(ss.f1_scores(embed([[8, 2], [3, 7]]))[0][0]
                - 2 * (8 / 11) * (8 / 10) / ((8 / 11) + (8 / 10))) < 1e-15
    )
    ok = worst < 1e-12 and hand_ok
    report(5, ok, f"1,000 matrices, max |diff| {worst:.2e} (< 1e-12); "
                  f"hand cases (0.75, kappa 0.4, F1 0.762) exact: {hand_ok}")


# ---------------------------------------------------------------------------
# 6. scratch overfit on 64 labeled epochs
# ---------------------------------------------------------------------------


def test_c06_overfit():
    t0 = time.time()
    corpus = ss.synthesize_corpus(6, 16, (0.18, 0.15, 0.42, 0.12, 0.13), 100.0, seed=10)
    train = corpus.subset(corpus.subject_ids[:4])  # 64 epochs
    val = corpus.subset(corpus.subject_ids[4:])
    assert train.n_epochs == 64
    cfg = ss.ModelConfig(**{**SMALL_D64.to_dict(), "dropout": 0.0})
    tc = ss.TrainConfig(n_epochs=200, batch_size=8, lr_grid=(1e-4,), seed=0,
                        track_train_accuracy=True)
    _, history = ss.finetune(None, train, val, cfg, tc)
    final = history[-1]["train_bal_acc"]
    elapsed = time.time() - t0
    ok = final >= 0.99 and elapsed < 600
    report(6, ok, f"train bal acc after 200 epochs at lr 1e-4: {final:.4f} "
                  f"(>= 0.99), {elapsed:.0f}s (< 600s)")


# ---------------------------------------------------------------------------
# 7. pretext learnability on the synthetic corpus
# ---------------------------------------------------------------------------


def test_c07_pretext_learnability():
    t0 = time.time()
    corpus = ss.synthesize_corpus(22, 200, (0.18, 0.15, 0.42, 0.12, 0.13), 100.0, seed=21)
    train = corpus.subset(corpus.subject_ids[:20])  # 20 subjects x 200 epochs
    held = corpus.subset(corpus.subject_ids[20:])
    tc = ss.TrainConfig(learning_rate=1e-3, n_epochs=50, batch_size=64, seed=0,
                        keep_ratio=0.5, mask_ratio=0.0)
    ckpt = ss.pretrain(train, SMALL_D64, tc)
    x_held, _ = build_dataset(held, SMALL_D64)
    _, acc = pretext_eval(ckpt.params, x_held, 0.5, 0.0, seed=123)
    elapsed = time.time() - t0
    ok = acc >= 0.10 and elapsed < 1800
    report(7, ok, f"held-out top-1 position accuracy {acc:.4f} "
                  f"(>= 0.10, chance 1/101 = 0.0099), {elapsed:.0f}s (< 1800s)")


# ---------------------------------------------------------------------------
# 8 & 9. directional experiment checks on one shared corpus
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep_setup():
    corpus = ss.synthesize_corpus(100, 30, (0.18, 0.15, 0.42, 0.12, 0.13), 100.0, seed=33)
    splits = ss.split_subjectwise(corpus, ss.SplitSpec(0.66, 0.22, 0.12, seed=1))
    cfg = ss.ModelConfig(patch_len=30, n_tokens=101, d_model=48, depth=2, n_heads=4,
                         d_ff=96, dropout=0.1, n_positions=101, n_classes=5)
    pre = ss.TrainConfig(learning_rate=1e-3, n_epochs=60, batch_size=64, seed=0)
    fine = ss.TrainConfig(n_epochs=60, batch_size=32, lr_grid=(3e-4,), seed=0)
    return splits, cfg, pre, fine


def test_c08_label_efficiency_direction(sweep_setup):
    t0 = time.time()
    splits, cfg, pre, fine = sweep_setup
    spec = SweepSpec(label_fractions=(0.10,), methods=(METHOD_SCRATCH, METHOD_PT),
                     pretrain_multipliers=(1,), seeds=(0, 1, 2),
                     model_cfg=cfg, pretrain_cfg=pre, finetune_cfg=fine)
    result = run_label_efficiency(spec, splits)
    pt = np.mean([r.metrics.balanced_accuracy for r in result.rows if r.method == METHOD_PT])
    sc = np.mean([r.metrics.balanced_accuracy for r in result.rows if r.method == METHOD_SCRATCH])
    gap = pt - sc
    elapsed = time.time() - t0
    ok = gap >= 0.02 and elapsed < 7200
    report(8, ok, f"10% labels, mean over 3 seeds: PT {pt:.4f} vs scratch {sc:.4f}, "
                  f"gap {gap:+.4f} (>= +0.02; full-scale reference gap +0.05), {elapsed:.0f}s (< 2h)")


def test_c09_pretraining_scale_direction(sweep_setup):
    t0 = time.time()
    splits, cfg, pre, fine = sweep_setup
    spec = SweepSpec(label_fractions=(0.01,), methods=(METHOD_PT,),
                     pretrain_multipliers=(1, 10), seeds=(0, 1, 2),
                     model_cfg=cfg, pretrain_cfg=pre, finetune_cfg=fine)
    result = run_pretrain_scaling(spec, splits)
    m1 = np.mean([r.metrics.balanced_accuracy for r in result.rows if r.multiplier == 1])
    m10 = np.mean([r.metrics.balanced_accuracy for r in result.rows if r.multiplier == 10])
    elapsed = time.time() - t0
    ok = m10 >= m1
    report(9, ok, f"1% labels, mean over 3 seeds: 10x pretraining {m10:.4f} >= "
                  f"1x {m1:.4f} (full-scale reference 0.55 vs 0.52), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 10. pipeline exactness and end-to-end CLI determinism
# ---------------------------------------------------------------------------


def test_c10_pipeline_exactness(tmp_path, capsys):
    # ESR roundtrip bit-exactness
    corpus = ss.synthesize_corpus(3, 10, (0.2,) * 5, 100.0, seed=7)
    p1, p2 = tmp_path / "a.esr", tmp_path / "b.esr"
    ss.write_esr(p1, corpus)
    ss.write_esr(p2, ss.read_esr(p1))
    esr_ok = p1.read_bytes() == p2.read_bytes()

    # resampler sine fidelity
    t200 = np.arange(6000) / 200.0
    t100 = np.arange(3000) / 100.0
    sine_err = float(np.abs(
        ss.resample_fourier(np.sin(2 * np.pi * 10 * t200), 200.0, 100.0)
        - np.sin(2 * np.pi * 10 * t100)
    ).max())

    # tokenize / flatten inverse identity
    sig = np.random.default_rng(3).normal(size=3000).astype(np.float32)
    tok_ok = np.array_equal(ss.tokenize(sig).patches.ravel()[:3000], sig)

    # CLI determinism: byte-identical checkpoints and metric JSONs
    config = {
        "model": {"patch_len": 30, "n_tokens": 101, "d_model": 16, "depth": 1,
                  "n_heads": 2, "d_ff": 32, "dropout": 0.1, "n_positions": 101,
                  "n_classes": 5},
        "pretrain": {"n_epochs": 2, "batch_size": 32, "seed": 5},
        "finetune": {"n_epochs": 2, "batch_size": 32, "lr_grid": [1e-4], "seed": 5},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    corpus_path = tmp_path / "all.esr"
    assert cli_main(["synth", "--subjects", "6", "--epochs-per-subject", "10",
                     "--seed", "2", "--out", str(corpus_path)]) == 0
    assert cli_main(["split", "--in", str(corpus_path), "--fractions", "0.5,0.25,0.25",
                     "--seed", "0", "--out-dir", str(tmp_path / "sp")]) == 0

    artifacts = []
    for run in ("r1", "r2"):
        d = tmp_path / run
        d.mkdir()
        assert cli_main(["pretrain", "--train", str(tmp_path / "sp" / "train.esr"),
                         "--config", str(cfg_path), "--out-ckpt", str(d / "pt.ckpt")]) == 0
        assert cli_main(["finetune", "--train", str(tmp_path / "sp" / "train.esr"),
                         "--val", str(tmp_path / "sp" / "val.esr"),
                         "--config", str(cfg_path), "--init-ckpt", str(d / "pt.ckpt"),
                         "--out-ckpt", str(d / "ft.ckpt")]) == 0
        assert cli_main(["evaluate", "--test", str(tmp_path / "sp" / "test.esr"),
                         "--ckpt", str(d / "ft.ckpt"),
                         "--out-json", str(d / "metrics.json")]) == 0
        artifacts.append(tuple((d / n).read_bytes()
                               for n in ("pt.ckpt", "ft.ckpt", "metrics.json")))
    capsys.readouterr()
    cli_ok = artifacts[0] == artifacts[1]

    ok = esr_ok and sine_err < 1e-5 and tok_ok and cli_ok
    report(10, ok, f"ESR roundtrip bit-exact: {esr_ok}; sine resample err "
                   f"{sine_err:.2e} (< 1e-5); tokenize inverse: {tok_ok}; "
                   f"CLI runs byte-identical: {cli_ok}")
