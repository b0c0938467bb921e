"""Acceptance criteria 1-10, one test each.

Every test records a ``PASS``/``FAIL`` line in ``VERDICTS``; ``conftest.py`` prints
them at the end of the session. Run directly with ``python tests/test_acceptance.py``.
Criteria 6-8 train the default model on full-size synthetic splits and take
roughly 20 minutes on one core.
"""

import functools
import json
import shutil
import sys
import time

import numpy as np
import pytest

import _cases as C
from jachess import autodiff as ad
from jachess import cli
from jachess import data as D
from jachess import estimators as est
from jachess import evaluation as E
from jachess import regularizer as R
from jachess import trainer as T
from jachess.model import ModelConfig, forward, init_model

VERDICTS = {}
SEEDS = (0, 1, 2, 3, 4)
BINARY_TASKS = ("token-majority", "pattern-containment", "pair-overlap")
NOISE_SEEDS = (0, 1, 2)
ORACLE_INSTANCES = 16


def verdict(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    return ok


@functools.lru_cache(maxsize=None)
def splits_for(task):
    return D.generate_task(D.get_task(task), D.DEFAULT_SIZES, seed=0)


@functools.lru_cache(maxsize=None)
def trained(task, method, seed):
    spec = D.get_task(task)
    s = splits_for(task)
    rec = T.train(T.TrainConfig(method=method, seed=seed), s.train, s.unlabeled,
                  ModelConfig(num_classes=spec.num_classes), task=task)
    return rec.checkpoint


def oracle_jacobian_sum(ck, seqs):
    """sum_k ||J^(k)||_F with exact Jacobians, averaged over instances."""
    tr = forward(ck, seqs)
    total = 0.0
    for k in range(1, ck.config.num_layers + 1):
        total += np.mean([np.linalg.norm(est.exact_jacobian(tr, k, i)) for i in range(len(seqs))])
    return total


# ------------------------------------------------------------------ 1


def test_c1_gradients_match_finite_differences():
    start = time.perf_counter()
    errs = []
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        for name, fn, arrays in C.primitive_cases(rng):
            errs.append((f"{name}/{seed}", C.check_primitive(fn, arrays, rng)))
    for seed in range(7):
        errs.append((f"transformer/{seed}", C.transformer_grad_error(seed)))
    elapsed = time.perf_counter() - start
    worst_name, worst = max(errs, key=lambda e: e[1])
    ok = len(errs) == 100 and worst < 1e-4 and elapsed < 60
    assert verdict(1, ok, f"{len(errs)} cases, worst rel err {worst:.1e} ({worst_name}), {elapsed:.1f}s")


# ------------------------------------------------------------------ 2


def test_c2_second_order():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((5, 5))
    A = (M + M.T) / 2
    At = ad.Tensor(A)
    tr = est.function_trace(lambda x: ad.sum_(ad.mul(x, ad.matmul(x, At)), axis=1), rng.standard_normal(5))
    quad_err = np.abs(est.exact_hessian(tr, 1, 0) - 2 * A).max()

    asym = 0.0
    for seed in (0, 1, 2):
        ck = init_model(ModelConfig(seed=seed))
        t = forward(ck, [[4, 9, 13, 2, 30, 1]], second_order=True)
        for k in (1, 4):
            H = est.exact_hessian(t, k, seed + k)
            asym = max(asym, np.abs(H - H.T).max())
    ok = quad_err < 1e-8 and asym < 1e-8
    assert verdict(2, ok, f"|H - 2A| = {quad_err:.1e}, max asymmetry {asym:.1e}")


# ------------------------------------------------------------------ 3


def test_c3_estimators_unbiased():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((8, 8))
    A = M @ M.T / 8 + np.eye(8)
    got = est.trace_estimate(A, est.ProjectionSampler(0, est.GAUSSIAN, dimension=8), 100_000)
    trace_rel = abs(got - np.trace(A)) / np.trace(A)
    lin = est.function_trace(lambda x: ad.matmul(x, ad.Tensor(np.array([[1.0, 3.0], [2.0, 4.0]]))),
                             np.zeros(2))
    jac = est.jacobian_frob_sq(lin, 1, est.ProjectionSampler(1), p=2000).value
    ok = trace_rel < 0.01 and abs(jac - 30) / 30 < 0.1
    assert verdict(3, ok, f"trace rel err {trace_rel:.4f}; linear-map estimate {jac:.2f} vs 30")


# ------------------------------------------------------------------ 4


def test_c4_oracle_agreement_on_default_model():
    start = time.perf_counter()
    ck = init_model(ModelConfig())
    # 8 tokens x embed 32 keeps the exact Hessian within its size guard
    trace = forward(ck, [[2, 8, 3, 9, 2, 10, 11, 1], [12, 3, 3, 14, 2, 15, 1]], second_order=True)
    rows = []
    for k in range(1, 5):
        exact = np.mean([(est.exact_jacobian(trace, k, i) ** 2).sum() for i in range(2)])
        got = est.jacobian_frob_sq(trace, k, est.ProjectionSampler(k), p=1000).value
        rows.append((f"J{k}", abs(got - exact) / exact))
        for d in (5, 20):
            exact = np.mean([(est.exact_hessian(trace, k, d, i) ** 2).sum() for i in range(2)])
            got = est.hessian_frob_sq(trace, k, d, est.ProjectionSampler(10 * k + d), p=1000).value
            rows.append((f"H{k}[{d}]", abs(got - exact) / exact))
    elapsed = time.perf_counter() - start
    name, worst = max(rows, key=lambda r: r[1])
    ok = worst < 0.1 and elapsed < 300
    assert verdict(4, ok, f"{len(rows)} estimates, worst rel err {worst:.3f} ({name}), {elapsed:.0f}s")


# ------------------------------------------------------------------ 5


def test_c5_lambda_allocation():
    rng = np.random.default_rng(0)
    sum_err = monotone_bad = 0
    for _ in range(200):
        j = rng.uniform(0, 20, rng.integers(2, 9))
        xi = float(rng.uniform(1e-5, 5))
        lam = R.allocate_lambdas(j, xi)
        sum_err = max(sum_err, abs(lam.sum() - xi))
        order = np.argsort(j)
        monotone_bad += int(np.any(np.diff(lam[order]) > 0))
    uni = R.allocate_lambdas([1.0, 1.0, 1.0], 0.1)
    uni_err = np.abs(uni - 1 / 30).max()
    ok = sum_err < 1e-10 and uni_err < 1e-15 and monotone_bad == 0
    assert verdict(5, ok, f"max |sum - xi| {sum_err:.1e}, uniform err {uni_err:.1e}, "
                          f"{monotone_bad} non-monotone draws")


# ------------------------------------------------------------------ 6


def test_c6_jachess_train_smooths_token_majority():
    start = time.perf_counter()
    task = "token-majority"
    test = splits_for(task).test
    seqs = D.sequences(test)[:ORACLE_INSTANCES]
    stats = {}
    for m in ("base", "jachess-train"):
        cks = [trained(task, m, s) for s in SEEDS]
        stats[m] = (np.mean([oracle_jacobian_sum(ck, seqs) for ck in cks]),
                    np.mean([E.clean_score(ck, test, "accuracy") for ck in cks]))
    elapsed = time.perf_counter() - start
    (jb, ab), (jt, at) = stats["base"], stats["jachess-train"]
    ok = jt < jb and at >= ab - 0.02 and elapsed < 1800
    assert verdict(6, ok, f"sum ||J||_F base {jb:.2f} vs jachess-train {jt:.2f}; "
                          f"accuracy {ab:.4f} vs {at:.4f}; {elapsed / 60:.1f} min")


# ------------------------------------------------------------------ 7 and 8


def corrupted_accuracy(ck, test):
    return E.corruption_sweep(ck, test, [0.2], seeds=NOISE_SEEDS, metric="accuracy").mean[0]


def brier_of(ck, test):
    return E.brier(E.positive_probs(E._logits(ck, D.sequences(test))), D.targets(test))


def test_c7_corruption_robustness_trend():
    wins, parts = 0, []
    for task in BINARY_TASKS:
        test = splits_for(task).test
        base = np.mean([corrupted_accuracy(trained(task, "base", s), test) for s in SEEDS])
        val = np.mean([corrupted_accuracy(trained(task, "jachess-val", s), test) for s in SEEDS])
        wins += val >= base
        parts.append(f"{task} {base:.4f}/{val:.4f}")
    ok = wins >= 2
    assert verdict(7, ok, f"{wins}/3 tasks with jachess-val >= base at 20% corruption (base/val: "
                          + "; ".join(parts) + ")")


def test_c8_calibration_trend():
    from test_evaluation import HAND_P, HAND_Y

    rep = E.calibration_report(HAND_P, HAND_Y)
    hand_ok = rep.counts.tolist() == [3, 2, 2, 1, 3, 0, 3, 2]
    parts, worse = [], []
    for task in BINARY_TASKS:
        test = splits_for(task).test
        base = np.mean([brier_of(trained(task, "base", s), test) for s in SEEDS])
        val = np.mean([brier_of(trained(task, "jachess-val", s), test) for s in SEEDS])
        parts.append(f"{task} {base:.4f}/{val:.4f}")
        if val > base:
            worse.append(task)
    ok = hand_ok and not worse
    detail = ("hand-built bins " + ("match" if hand_ok else "MISMATCH") + "; Brier base/val: "
              + "; ".join(parts) + (f"; jachess-val worse on {', '.join(worse)}" if worse else ""))
    assert verdict(8, ok, detail)


# ------------------------------------------------------------------ 9


SWEEP_CONFIG = {
    "version": 1,
    "train": {"epochs": 2, "batch_size": 32},
    "tasks": ["token-majority"],
    "seeds": [0, 1, 2],
    "sizes": {"train": 64, "unlabeled": 16, "test": 128},
    "sweep": {"hessian_dims": [0, 5, 10, 20, 50], "method": "jachess-train",
              "cross_holder_reference": True},
}


def test_c9_ablation_grid(tmp_path):
    cfg = cli.parse_config({**SWEEP_CONFIG, "output_dir": str(tmp_path)})
    table = cli.cmd_sweep(cfg)
    grid = {(c["strategy"], c["hessian_dims"]): c for c in table["cells"] if c["strategy"] != "reference"}
    populated = [c for c in grid.values() if len(c["scores"]) == 3 and np.isfinite(c["mean_score"])]
    csv_rows = (tmp_path / "sweep.csv").read_text().strip().split("\n")[1:]

    ref = next(c for c in table["cells"] if c["strategy"] == "reference")
    pen = grid[("penultimate-only", 10)]
    a, b = np.array(pen["scores"]), np.array(ref["scores"])
    noise = 2 * np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    tol = max(noise, 2 / SWEEP_CONFIG["sizes"]["test"])
    gap = abs(a.mean() - b.mean())
    ok = len(grid) == 25 and len(populated) == 25 and len(csv_rows) == 26 and gap <= tol
    assert verdict(9, ok, f"{len(populated)}/25 cells populated; penultimate-only {a.mean():.4f} vs "
                          f"cross-holder {b.mean():.4f} (gap {gap:.4f}, tolerance {tol:.4f})")


# ------------------------------------------------------------------ 10


DET_CONFIG = {
    "version": 1,
    "model": {"embed_dim": 16, "num_layers": 2, "num_heads": 2, "ff_dim": 16},
    "train": {"epochs": 1, "batch_size": 16},
    "tasks": ["pair-overlap", "overlap-score"],
    "methods": ["base", "jachess-train", "jachess-val"],
    "seeds": [0, 1],
    "sizes": {"train": 48, "unlabeled": 16, "test": 32},
    "eval": {"deltas": [0.0, 0.5], "rates": [0.1, 0.2], "noise_seeds": [0, 1]},
    "sweep": {"strategies": ["uniform", "softmax-base-smoothness"], "hessian_dims": [0, 10]},
}
REPORT_FILES = ("records.json", "eval_report.json", "eval_report.csv", "sweep.json", "sweep.csv",
                "diagnose.json")


def _run_all_commands(root):
    root.mkdir(parents=True)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps({**DET_CONFIG, "output_dir": str(root)}))
    assert cli.main(["train", str(cfg_path)]) == 0
    assert cli.main(["eval", str(root), str(cfg_path)]) == 0
    assert cli.main(["sweep", str(cfg_path)]) == 0
    ck = root / "pair-overlap" / "jachess-val" / "seed1" / "checkpoint.bin"
    assert cli.main(["diagnose", str(ck), "pair-overlap", "--projections", "20",
                     "--output", str(root / "diagnose.json")]) == 0
    files = {name: (root / name).read_bytes() for name in REPORT_FILES}
    for p in sorted(root.glob("*/*/seed*/*")):
        files[str(p.relative_to(root))] = p.read_bytes()
    return files


def test_c10_reruns_are_byte_identical(tmp_path):
    root = tmp_path / "run"
    a = _run_all_commands(root)
    shutil.rmtree(root)
    b = _run_all_commands(root)
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differ
    assert verdict(10, ok, f"{len(a)} output files compared, {len(differ)} differ"
                           + (f": {differ[:5]}" if differ else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
