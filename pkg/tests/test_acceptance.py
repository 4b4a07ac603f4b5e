"""End-to-end acceptance checks. Each test prints one ``criterion N ...: PASS|FAIL`` line.

Criterion 4 trains nine desk-scale models (about 40 minutes on one core); skip it
with ``-m "not slow"``.
"""
import dataclasses
import math
import time

import numpy as np
import pytest

from psnet import autodiff as ad
from psnet.autodiff import Tensor
from psnet.data import SceneConfig, build_vocab, generate_dataset, write_dataset
from psnet.experiments import ablation, overfit
from psnet.gradcheck import run_gradcheck
from psnet.metrics import EvalCorpus, align_exact, bleu_n, cider, lcs_length, meteor_exact, rouge_l, s_m_average
from psnet.model import BOS, ModelConfig, decode_train, encode, encode_trace, init_params, sr_module_forward
from psnet.nn import attention_weights, causal_mask, init_attention, multi_head_attention
from psnet.train import TrainConfig, cross_entropy_loss, evaluate_loss, load_checkpoint, save_checkpoint, train

from test_metrics import PUBLISHED_ROWS, oracle_alignment, oracle_bleu, oracle_cider, oracle_lcs, oracle_rouge, random_corpus


def report(capsys, number, title, checks, detail=""):
    """Print the criterion line, then fail the test with the first failed check."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    if failed:
        line += f" failed: {', '.join(failed)}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def test_criterion_1_gradient_correctness(capsys):
    start = time.perf_counter()
    reports = run_gradcheck()
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_error)
    checks = {r.block: r.passed for r in reports}
    checks["under 2 minutes"] = elapsed < 120
    report(capsys, 1, "gradient correctness", checks, f"{len(reports)} blocks, worst {worst.block} {worst.max_error:.2e}, {elapsed:.1f} s")


def test_criterion_2_architectural_invariants(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    cfg = ModelConfig(vocab_size=40, precision="float64")
    params = init_params(cfg, 11)
    t1, t2 = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    checks = {}

    # softmax rows: plain, masked, and inside attention
    x = rng.standard_normal((6, 9)) * 20
    rows = ad.softmax_rows(Tensor(x)).data.sum(axis=1)
    attn = init_attention(rng, 64, 4)
    w = attention_weights(Tensor(rng.standard_normal((5, 64))), Tensor(rng.standard_normal((5, 64))), attn, causal_mask(5))
    checks["softmax rows sum to 1"] = np.abs(rows - 1).max() <= 1e-6 and np.abs(w.sum(-1) - 1).max() <= 1e-6

    # causal mask: future tokens cannot move earlier logits
    mems = encode(t1, t2, params)
    tokens = [BOS, 4, 9, 12, 5, 7]
    base = decode_train(tokens, mems, params).data
    causal = True
    for pos in range(1, len(tokens)):
        moved = decode_train(tokens[:pos] + [20] * (len(tokens) - pos), mems, params).data
        causal &= np.array_equal(base[:pos], moved[:pos])
    checks["causal perturbation bitwise"] = causal

    # SR residual degeneracy
    feats = [Tensor(rng.standard_normal((16, 64))) for _ in range(3)]
    zeroed = init_params(cfg, 12)
    degenerate = True
    for k, sr in enumerate(zeroed.sr):
        sr.mlp.w2.data[:] = 0
        degenerate &= np.array_equal(sr_module_forward(k, feats, sr).data, feats[k].data)
    checks["SR zero MLP gives F_k"] = degenerate

    # memory permutation: MCA directly, and token order inside the SR memory
    q, k = rng.standard_normal((4, 64)), rng.standard_normal((10, 64))
    perm = rng.permutation(10)
    mca = np.array_equal(
        multi_head_attention(Tensor(q), Tensor(k), Tensor(k), attn).data,
        multi_head_attention(Tensor(q), Tensor(k[perm]), Tensor(k[perm]), attn).data,
    )
    sr_perm = True
    for kk, sr in enumerate(params.sr):
        base_o = sr_module_forward(kk, feats, sr).data
        # shuffle tokens inside every memory map, then swap the two maps
        shuffled = [f if j == kk else Tensor(f.data[rng.permutation(16)]) for j, f in enumerate(feats)]
        a, b = [j for j in range(3) if j != kk]
        swapped = list(shuffled)
        swapped[a], swapped[b] = shuffled[b], shuffled[a]
        sr_perm &= np.array_equal(base_o, sr_module_forward(kk, shuffled, sr).data)
        sr_perm &= np.array_equal(base_o, sr_module_forward(kk, swapped, sr).data)
    checks["MCA memory permutation"] = mca
    checks["SR memory permutation"] = sr_perm

    # difference path
    same = encode_trace(t1, t1.copy(), params)
    checks["D = 0 for identical pair"] = bool(np.all(same.diffs[0].data == 0))
    forward, backward = encode_trace(t1, t2, params), encode_trace(t2, t1, params)
    checks["swap negates D"] = np.array_equal(backward.diffs[0].data, -forward.diffs[0].data)

    elapsed = time.perf_counter() - start
    checks["under 1 minute"] = elapsed < 60
    report(capsys, 2, "architectural invariants", checks, f"{len(checks) - 1} properties, {elapsed:.1f} s")


def test_criterion_3_overfit(capsys):
    start = time.perf_counter()
    samples = generate_dataset(1, 32)
    result = overfit(samples, ModelConfig(), TrainConfig(seed=0), max_epochs=300)
    elapsed = time.perf_counter() - start
    checks = {
        "BLEU-4 >= 0.95": result.bleu4 >= 0.95,
        "exact match >= 90%": result.exact >= 0.9,
        "within 300 epochs": result.epochs <= 300,
        "under 10 minutes": elapsed < 600,
    }
    detail = f"{result.epochs} epochs, BLEU-4 {result.bleu4:.4f}, exact {result.exact:.3f}, loss {result.losses[-1]:.4f}, {elapsed:.0f} s"
    report(capsys, 3, "overfit end-to-end", checks, detail)


@pytest.mark.slow
def test_criterion_4_ablation_direction(capsys):
    start = time.perf_counter()
    result = ablation()
    elapsed = time.perf_counter() - start
    m = result.means
    checks = {
        "psnet >= pdp": m["psnet"] >= m["pdp"],
        "pdp >= baseline": m["pdp"] >= m["baseline"],
        "under 1 hour": elapsed < 3600,
    }
    per_seed = "; ".join(f"{k} {', '.join(f'{v:.3f}' for v in result.scores[k])}" for k in ("baseline", "pdp", "psnet"))
    detail = f"mean BLEU-4 baseline {m['baseline']:.4f}, pdp {m['pdp']:.4f}, psnet {m['psnet']:.4f}; per seed {per_seed}; {elapsed:.0f} s"
    report(capsys, 4, "ablation direction", checks, detail)


def test_criterion_5_metric_oracles(capsys):
    cases = [random_corpus(seed, size=int(np.random.default_rng(seed).integers(2, 6))) for seed in range(30)]
    worst = {"BLEU": 0.0, "ROUGE_L": 0.0, "CIDEr": 0.0, "METEOR": 0.0}
    for c in cases:
        worst["BLEU"] = max(worst["BLEU"], *(abs(bleu_n(c, n) - oracle_bleu(c, n)) for n in range(1, 5)))
        worst["ROUGE_L"] = max(worst["ROUGE_L"], abs(rouge_l(c) - oracle_rouge(c)))
        worst["CIDEr"] = max(worst["CIDEr"], abs(cider(c) - oracle_cider(c)))
    meteor_ok = True
    for c in cases:
        for hyp, refs in zip(c.hyps, c.refs):
            meteor_ok &= all(align_exact(hyp, r) == oracle_alignment(hyp, r) for r in refs)
        want = []
        for hyp, refs in zip(c.hyps, c.refs):
            best = 0.0
            for r in refs:
                m, ch = oracle_alignment(hyp, r)
                if m:
                    p, rc = m / len(hyp), m / len(r)
                    best = max(best, 10 * p * rc / (rc + 9 * p) * (1 - 0.5 * (ch / m) ** 3))
            want.append(best)
        worst["METEOR"] = max(worst["METEOR"], abs(meteor_exact(c) - sum(want) / len(want)))
    lcs_ok = all(lcs_length(h, r) == oracle_lcs(h, r) for c in cases for h, rs in zip(c.hyps, c.refs) for r in rs)
    hand = bleu_n(EvalCorpus.from_strings(["the cat sat"], [["the cat sat on the mat"]]), 1)
    rows = {name: abs(s_m_average(*vals[:4]) - vals[4]) for name, vals in PUBLISHED_ROWS.items()}
    checks = {f"{k} oracle": v <= 1e-10 for k, v in worst.items()}
    checks["METEOR alignment"] = meteor_ok
    checks["LCS"] = lcs_ok
    checks["BLEU-1 hand case"] = abs(hand - math.exp(-1)) <= 1e-12
    checks["ten S*_m rows"] = len(rows) == 10 and max(rows.values()) < 0.01
    detail = f"{len(cases)} corpora, worst gaps " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", S*_m max gap {max(rows.values()):.4f}"
    report(capsys, 5, "metric oracle equivalence", checks, detail)


def test_criterion_6_determinism_and_persistence(capsys, tmp_path):
    checks = {}
    for name in ("a", "b"):
        write_dataset(generate_dataset(13, 40), tmp_path / f"{name}.jsonl")
    checks["dataset bytes"] = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    samples = generate_dataset(17, 8)
    vocab = build_vocab(c for s in samples for c in s.captions)
    cfg = ModelConfig(vocab_size=len(vocab))
    full = train(cfg, TrainConfig(epochs=5, seed=3), samples, out_dir=tmp_path / "full")
    again = train(cfg, TrainConfig(epochs=5, seed=3), samples, out_dir=tmp_path / "again")
    checks["loss.log bytes"] = (tmp_path / "full" / "loss.log").read_bytes() == (tmp_path / "again" / "loss.log").read_bytes()

    ckpt = load_checkpoint(tmp_path / "full" / "checkpoint.psnt")
    checks["checkpoint round trip"] = all(np.array_equal(ckpt.params[k], full.checkpoint.params[k]) for k in full.checkpoint.params) and all(
        np.array_equal(ckpt.adam.v[k], full.checkpoint.adam.v[k]) for k in full.checkpoint.adam.v
    )
    save_checkpoint(ckpt, tmp_path / "copy.psnt")
    checks["checkpoint bytes"] = (tmp_path / "copy.psnt").read_bytes() == (tmp_path / "full" / "checkpoint.psnt").read_bytes()

    train(cfg, TrainConfig(epochs=2, seed=3), samples, out_dir=tmp_path / "split")
    rest = train(cfg, TrainConfig(epochs=3, seed=3), samples, out_dir=tmp_path / "split", resume=load_checkpoint(tmp_path / "split" / "checkpoint.psnt"))
    checks["resume loss trace"] = rest.losses == full.losses and (tmp_path / "split" / "loss.log").read_bytes() == (tmp_path / "full" / "loss.log").read_bytes()
    checks["resume parameters"] = all(np.array_equal(rest.checkpoint.params[k], full.checkpoint.params[k]) for k in full.checkpoint.params)
    report(capsys, 6, "determinism and persistence", checks, "5-epoch run vs 2 + 3 resumed")


def test_criterion_7_loss_sanity(capsys):
    samples = generate_dataset(29, 32)
    vocab = build_vocab(c for s in samples for c in s.captions)
    cfg = ModelConfig(vocab_size=len(vocab))
    ln_v = math.log(len(vocab))
    initial = [evaluate_loss(samples, init_params(cfg, seed), vocab) for seed in range(3)]
    first_epoch = train(cfg, TrainConfig(epochs=1), samples).losses[0]
    uniform = [abs(float(cross_entropy_loss(Tensor(np.zeros((5, v))), [4] * 5).data) - math.log(v)) for v in (5, 40, 64, 1000)]
    checks = {
        "fresh loss within 10% of ln V": all(abs(l - ln_v) <= 0.1 * ln_v for l in initial),
        "first epoch within 10% of ln V": abs(first_epoch - ln_v) <= 0.1 * ln_v,
        "uniform logits give ln V": max(uniform) <= 1e-12,
    }
    detail = f"ln V {ln_v:.4f}, fresh " + ", ".join(f"{l:.4f}" for l in initial) + f", first epoch {first_epoch:.4f}"
    report(capsys, 7, "loss sanity", checks, detail)
