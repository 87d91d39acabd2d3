"""Acceptance suite: one recorded pass/fail line per primary criterion.

Lines appear in the "acceptance criteria" section of the pytest summary.
"""
import itertools
import json
import time
from decimal import Decimal
from functools import lru_cache

import numpy as np
import pytest

from scanshare import autodiff as ad
from scanshare import metrics as M
from scanshare.accounting import (PUBLISHED_TABLE2, PUBLISHED_TABLE3, late_split_from_table, split_sharing_report,
                                  table_totals)
from scanshare.autodiff import Tensor
from scanshare.cli import main, sha256_file
from scanshare.data import Fixation, TaskSpec, generate_scene
from scanshare.experiment import ExperimentConfig, run_sharing_experiment
from scanshare.model import ModelConfig, SplitConfig, build_model
from scanshare.training import load_checkpoint

TINY_CLI = {"feature_dim": 16, "memory_layers": 1, "aggregation_layers": 1}


# -- 1. published cost arithmetic ------------------------------------------


def test_table3_arithmetic(acceptance):
    t0 = time.perf_counter()
    totals = table_totals(PUBLISHED_TABLE2)
    row = late_split_from_table(PUBLISHED_TABLE2).row("LS")
    seconds = time.perf_counter() - t0
    flops_gap = abs(Decimal(row.flops_pct) - Decimal(PUBLISHED_TABLE3["LS"][1]))
    ok = (row.params_pct == "31.23" and flops_gap <= Decimal("0.1")
          and (totals.params_total, totals.params_trainable) == (Decimal("42.783"), Decimal("19.328"))
          and (totals.flops_total, totals.flops_trainable) == (Decimal("38.349"), Decimal("24.931"))
          and seconds < 1)
    acceptance("table3-arithmetic", ok,
               f"LS params {row.params_pct}% (published 31.23), FLOPs {row.flops_pct}% vs 92.29 "
               f"(gap {flops_gap} pp), params {totals.params_total}->{totals.params_trainable} M, "
               f"GFLOPS {totals.flops_total}->{totals.flops_trainable}, {seconds * 1e3:.1f} ms")
    assert ok


# -- 2. gradients -----------------------------------------------------------


def _op_cases(rng):
    """(name, input arrays, op) for every differentiable operation; inputs in [-1, 1]."""
    def arr(*shape):
        return rng.uniform(-1, 1, shape)

    def away_from_kinks(x):
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.3, x)
        return np.where(np.abs(x) < 0.05, 0.3, x)

    unary = {
        "neg": ad.neg, "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "gelu": ad.gelu,
        "relu": ad.relu, "clip": lambda x: ad.clip(x, -0.5, 0.5),
        "log": lambda x: ad.log(x * x + 0.5), "sqrt": lambda x: ad.sqrt(x * x + 0.5),
        "power": lambda x: ad.power(x * x + 0.5, 2.5),
        "sum": lambda x: ad.tsum(x, axis=1), "mean": lambda x: ad.mean(x, axis=0, keepdims=True),
        "reshape": lambda x: ad.reshape(x, (2, 6)), "transpose": ad.transpose,
        "swapaxes": lambda x: ad.swapaxes(x, 0, 1),
        "getitem": lambda x: ad.getitem(x, (slice(1, 3), [0, 2, 2])),
        "softmax": lambda x: ad.softmax(x, -1),
        "concat": lambda x: ad.concat([x, x * x], axis=1), "stack": lambda x: ad.stack([x, x * x], axis=0),
        "bilinear_sample": lambda x: ad.bilinear_sample(ad.reshape(x, (1, 3, 4)), [[0.3, 0.6], [0.9, 0.1]]),
    }
    for name, fn in unary.items():
        yield name, {"x": away_from_kinks(arr(3, 4))}, lambda q, fn=fn: fn(q["x"])
    for name, fn in {"add": ad.add, "sub": ad.sub, "mul": ad.mul}.items():
        yield name, {"a": arr(3, 4), "b": arr(1, 4)}, lambda q, fn=fn: fn(q["a"], q["b"])
    yield "div", {"a": arr(3, 4), "b": arr(1, 4)}, lambda q: ad.div(q["a"], q["b"] * q["b"] + 0.5)
    yield "matmul", {"a": arr(2, 3, 4), "b": arr(4, 3)}, lambda q: ad.matmul(q["a"], q["b"])
    yield "linear", {"x": arr(5, 3), "w": arr(3, 4), "b": arr(4)}, lambda q: ad.linear(q["x"], q["w"], q["b"])
    yield "layer_norm", {"x": arr(3, 6), "g": arr(6), "b": arr(6)}, \
        lambda q: ad.layer_norm(q["x"], q["g"], q["b"])
    yield "conv2d", {"x": arr(2, 6, 5), "k": arr(3, 2, 3, 3), "b": arr(3)}, \
        lambda q: ad.conv2d(q["x"], q["k"], q["b"], stride=2, padding=1)
    yield "multiscale_sample", {"v": arr(2, 4 * 4 + 2 * 3, 3), "p": rng.uniform(0.03, 0.97, (2, 3, 2, 2, 2))}, \
        lambda q: ad.multiscale_sample(q["v"], [(4, 4), (2, 3)], q["p"])
    names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
    attn = {n: arr(4, 4) if n.startswith("w") else arr(4) for n in names}
    yield "multi_head_attention", {"q": arr(3, 4), "kv": arr(5, 4), **attn}, \
        lambda t: ad.multi_head_attention(t["q"], t["kv"], t["kv"], 2, {n: t[n] for n in names},
                                          mask=np.array([[True] * 4 + [False]]))


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = {}
    with ad.precision(np.float64):
        rng = np.random.default_rng(0)
        for name, arrays, op in _op_cases(rng):
            params = ad.parameters_from(arrays)
            weights = rng.normal(size=op(params).shape)  # fixed projection to a scalar loss
            worst[name] = ad.check_gradients(lambda q, op=op, w=weights: ad.tsum(op(q) * w), params).max_error

        cfg = ModelConfig(feature_dim=16, decoder_layers=2, memory_layers=1, aggregation_layers=1)
        model = build_model(cfg, SplitConfig(1, 2), 0)
        img = np.random.default_rng(1).uniform(0, 1, (3, 32, 32))
        fix = [Fixation(0.5, 0.5), Fixation(0.3, 0.7), Fixation(0.8, 0.2)]
        head_w = np.random.default_rng(2).normal(size=(3, 64))

        def model_loss(_):
            total = 0
            for task in (TaskSpec.free_viewing(), TaskSpec.search(3)):
                logits, term = model.teacher_forced(model.pyramid(img, task.kind), fix, task)
                total = total + ad.tsum(ad.softmax(logits, -1) * head_w) + ad.tsum(ad.log(term))
            return total

        worst["tiny_model"] = ad.check_gradients(model_loss, model.params, max_entries=3).max_error
    seconds = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and seconds < 120
    acceptance("gradient-suite", ok, f"{len(worst) - 1} ops + tiny model (D=16, 2 decoder layers), "
                                     f"worst {name} rel err {err:.2e}, {seconds:.1f} s")
    assert ok, worst


# -- 3. metric oracles ------------------------------------------------------


@lru_cache(maxsize=None)
def _recursive_edit(a, b):
    if not a or not b:
        return len(a) + len(b)
    return min(_recursive_edit(a[1:], b) + 1, _recursive_edit(a, b[1:]) + 1,
               _recursive_edit(a[1:], b[1:]) + (a[0] != b[0]))


def _sweep_auc(s, positive):
    s, positive = s.ravel(), positive.ravel()
    tpr, fpr = [0.0], [0.0]
    for t in np.unique(s)[::-1]:
        tpr.append(((s >= t) & positive).sum() / positive.sum())
        fpr.append(((s >= t) & ~positive).sum() / (~positive).sum())
    return float(np.trapezoid(tpr, fpr))


def test_metric_oracles(acceptance):
    t0 = time.perf_counter()
    seqs = [s for n in range(6) for s in itertools.product("abc", repeat=n)]
    edit_ok = all(M.edit_distance(a, b) == _recursive_edit(a, b) for a in seqs for b in seqs)
    rng = np.random.default_rng(0)
    auc_gap = 0.0
    for _ in range(50):
        s = rng.random((8, 8))
        fix = [Fixation(*rng.random(2)) for _ in range(3)]
        positive = np.zeros((8, 8), bool)
        for f in fix:
            positive[M.fixation_cell(f, (8, 8))] = True
        auc_gap = max(auc_gap, abs(M.conditional_auc(s, fix) - _sweep_auc(s, positive)))
    nss = M.conditional_nss(np.array([[0.0, 0.0], [0.0, 1.0]]), [Fixation(0.9, 0.9)])
    f0 = Fixation(0.1, 0.1)
    half = np.array([[0.5, 0.5 / 3], [0.5 / 3, 0.5 / 3]])
    eighth = np.array([[0.125, 0.875 / 3], [0.875 / 3, 0.875 / 3]])
    base = M.build_density_baseline([M.Scanpath("i", TaskSpec.free_viewing(), [Fixation(0.5, 0.5), f0])],
                                    "fv", (2, 2))
    cig = [M.conditional_information_gain([(half, f0)], np.full((2, 2), 0.25)) - 1.0,
           M.conditional_information_gain([(eighth, f0)], np.full((2, 2), 0.5)) + 2.0,
           M.conditional_information_gain([(base.prob, f0)], base)]
    cig_gap = max(abs(c) for c in cig)
    seconds = time.perf_counter() - t0
    ok = edit_ok and auc_gap <= 1e-9 and abs(nss - 1.7321) <= 1e-4 and cig_gap <= 1e-9 and seconds < 60
    acceptance("metric-oracles", ok,
               f"edit distance {'exact' if edit_ok else 'MISMATCH'} on {len(seqs) ** 2} pairs, "
               f"AUC max gap {auc_gap:.1e} on 50 maps, NSS {nss:.4f}, cIG max gap {cig_gap:.1e}, {seconds:.1f} s")
    assert ok


# -- 4 and 7. CLI runs ------------------------------------------------------


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    t0 = time.perf_counter()
    (root / "model.json").write_text(json.dumps(TINY_CLI))
    data, fv = root / "data", root / "fv"
    fast = ["--epochs", "2", "--batch-size", "4", "--lr", "1e-3"]
    codes = [
        main(["synth", "--seed", "3", "--count", "20", "--grid", "2x2", "--categories", "3", "--size", "64x64",
              "--out", str(data)]),
        main(["train", "--stage", "fv", "--data", str(data), "--model-config", str(root / "model.json"),
              "--out", str(fv), *fast]),
        main(["train", "--stage", "vs-shared", "--split", "LS", "--data", str(data),
              "--init", str(fv / "checkpoint.ckpt"), "--out", str(root / "ls"), *fast]),
        main(["train", "--stage", "vs-e2e", "--data", str(data), "--init", str(fv / "checkpoint.ckpt"),
              "--out", str(root / "e2e"), *fast]),
    ]
    return root, codes, time.perf_counter() - t0


def test_freeze_exactness(acceptance, cli_runs):
    root, codes, seconds = cli_runs
    fv = load_checkpoint(root / "fv" / "checkpoint.ckpt")
    ls = load_checkpoint(root / "ls" / "checkpoint.ckpt")
    e2e = load_checkpoint(root / "e2e" / "checkpoint.ckpt")
    feature = ["encoder", "decoder_shared", "decoder_fv", "decoder_vs"]
    ls_frozen = ls.digest(feature) == fv.digest(feature)
    e2e_frozen = e2e.digest(["encoder"]) == fv.digest(["encoder"])
    # negative controls: the parts each stage does train must have moved
    ls_trained = ls.digest(["aggregation_vs"]) != fv.digest(["aggregation_vs"])
    e2e_trained = e2e.digest(["decoder_shared"]) != fv.digest(["decoder_shared"])
    ok = codes == [0, 0, 0, 0] and ls_frozen and e2e_frozen and ls_trained and e2e_trained and seconds < 600
    acceptance("freeze-exactness", ok,
               f"vs-shared LS encoder+decoder sha256 {'equal' if ls_frozen else 'DIFFERENT'}, "
               f"vs-e2e encoder sha256 {'equal' if e2e_frozen else 'DIFFERENT'}, trained parts moved: "
               f"{ls_trained and e2e_trained}, exit codes {codes}, {seconds:.0f} s")
    assert ok


# -- 5. late-split branch equivalence ---------------------------------------


def test_late_split_branch_equivalence(acceptance):
    model = build_model(ModelConfig(feature_dim=16), SplitConfig(6), 0)
    rng = np.random.default_rng(0)
    identical = 0
    with ad.no_grad():
        for _ in range(20):
            h, w = 32 * rng.integers(1, 4, 2)
            img = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
            a, b = model.pyramid(img, "fv"), model.pyramid(img, "vs")
            identical += all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.maps, b.maps))
    ok = identical == 20
    acceptance("late-split-equivalence", ok, f"{identical}/20 random inputs give bit-identical FV and VS pyramids")
    assert ok


# -- 6. desk-scale sharing experiment ---------------------------------------


@pytest.mark.slow
def test_sharing_experiment(acceptance):
    t0 = time.perf_counter()
    result = run_sharing_experiment(ExperimentConfig())
    minutes = (time.perf_counter() - t0) / 60
    ls, e2e, uni = (result.reports[k].ss for k in ("LS", "E2E", "uniform"))
    gap = result.relative_gap()
    flops = [Decimal(r.flops_pct) for r in result.sharing.rows]
    monotone = all(a > b for a, b in zip(flops, flops[1:]))
    checks = {
        "LS beats uniform": ls > uni,
        "LS within 15% of E2E": abs(gap) <= 0.15,
        "ES51 trains more than LS": result.trainable["ES51"] > result.trainable["LS"],
        "shared FLOPs monotone": monotone,
        "under 60 min": minutes < 60,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    acceptance("sharing-experiment", ok,
               f"SS LS {ls:.4f}, E2E {e2e:.4f}, uniform {uni:.4f}, LS vs E2E {100 * gap:+.2f}% relative; "
               f"trainable LS {result.trainable['LS']} < ES51 {result.trainable['ES51']}; shared FLOPs "
               f"{'/'.join(str(f) for f in flops)}%; {minutes:.1f} min"
               + (f"; failed: {', '.join(failed)}" if failed else ""))
    print(result.summary())
    assert ok, failed


# -- 7. distribution invariants and determinism -----------------------------


def test_distribution_invariants(acceptance, cli_runs, tmp_path):
    root, _, _ = cli_runs
    model = load_checkpoint(root / "ls" / "checkpoint.ckpt").build_model()
    rng = np.random.default_rng(0)
    sums, terms, lengths_ok, count = [], [], True, 0
    with ad.no_grad():
        for i in range(6):
            scene = generate_scene(100 + i, grid=(2, 2), categories=3, size=(64, 64))
            for task in (TaskSpec.free_viewing(), TaskSpec.search(min(scene.present_targets))):
                pyr = model.pyramid(scene, task.kind)
                for t in range(1, 5):
                    pred = model.predict(pyr, [(0.5, 0.5)] + [tuple(rng.random(2)) for _ in range(t - 1)], task)
                    sums.append(float(pred.prob.data.astype(np.float64).sum()))
                    terms.append(float(pred.termination.data))
                for seed in range(3):
                    for max_len in (1, 3, None):
                        path = model.rollout(scene, task, "sample", seed, max_len, pyramid=pyr)
                        limit = max_len or model.cfg.max_len(task.kind)
                        lengths_ok &= 1 <= len(path) <= limit
                        count += 1
    sum_gap = max(abs(s - 1) for s in sums)
    terms_ok = all(0 < t < 1 for t in terms)

    # byte-identical artifacts for fixed seeds
    fast = ["--epochs", "1", "--batch-size", "4", "--lr", "1e-3"]
    data, cfg = root / "data", root / "model.json"
    same = {}
    for k in ("a", "b"):
        main(["train", "--stage", "fv", "--data", str(data), "--model-config", str(cfg),
              "--out", str(tmp_path / k / "ckpt"), *fast])
        main(["eval", "--ckpt", str(tmp_path / k / "ckpt" / "checkpoint.ckpt"), "--data", str(data),
              "--task", "vs", "--out", str(tmp_path / k / "eval"), "--method", "run"])
        image = sorted((data / "images").glob("*.ppm"))[0]
        main(["render", "--ckpt", str(tmp_path / k / "ckpt" / "checkpoint.ckpt"), "--image", str(image),
              "--task", "fv", "--gt", str(data / "fixations.jsonl"), "--mode", "sample", "--seed", "5",
              "--out", str(tmp_path / k / "overlay.png")])
    for name, rel in (("checkpoint", "ckpt/checkpoint.ckpt"), ("report", "eval/report.csv"),
                      ("render", "overlay.png")):
        same[name] = sha256_file(tmp_path / "a" / rel) == sha256_file(tmp_path / "b" / rel)
    ok = sum_gap <= 1e-6 and terms_ok and lengths_ok and all(same.values())
    acceptance("distribution-invariants", ok,
               f"{len(sums)} heatmaps max |sum-1| {sum_gap:.1e}, termination in (0,1): {terms_ok}, "
               f"{count} rollouts within max_len: {lengths_ok}, byte-identical "
               + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok
