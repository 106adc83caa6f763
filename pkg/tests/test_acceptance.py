"""Acceptance suite.

Each test checks one criterion at its stated tolerance and records a
``PASS``/``FAIL`` line that is echoed in the terminal summary. Desk-scale
training runs are shared through module fixtures, so the file takes several
minutes end to end.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lstr import analysis as an
from lstr.cli import main as cli_main
from lstr.config import TrainConfig
from lstr.gradcheck import check_gradients
from lstr.inference import evaluate, latent_rollout, run_k_sweep, solve
from lstr.losses import fvu_loss, ghost_grad
from lstr.model import BACKBONE_KEYS, build_model, make_batch
from lstr.numerics import Rng
from lstr.taskgen import generate_dataset
from lstr.trainer import Trainer, save_model, split_validation
from lstr.trajectory import build_training_sequence, sqrt_pool

pytestmark = pytest.mark.slow

# Learning rates are scaled up from the fine-tuning table: these models start
# from random weights and must converge within 30 epochs.
DESK_CFG = TrainConfig(
    d_model=64, alpha=16, k=32, r=2, epochs=30, batch_size=16, seed=0,
    lr_backbone=1e-2, lr_skip=2e-2, lr_encoder=5e-3, lr_decoder=5e-3,
)
DESK_STEPS = (2, 3, 4)
DESK_TRAIN, DESK_TEST = 5000, 500
DESK_BUDGET_S = 15 * 60

# smaller runs for the multi-model comparisons
SMALL_TRAIN, SMALL_TEST, SMALL_EPOCHS = 1500, 300, 10


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} C{criterion}: {detail}")


def split(total: int, steps=DESK_STEPS) -> dict[int, int]:
    base, rem = divmod(total, len(steps))
    return {s: base + (i < rem) for i, s in enumerate(steps)}


def spearman(x, y) -> float:
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=float)
        for val in np.unique(v):
            tie = v == val
            r[tie] = r[tie].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    if rx.std() == 0 or ry.std() == 0:
        return 0.0
    return float(np.corrcoef(rx, ry)[0, 1])


class InvariantWatch:
    """Per-step hook collecting the architectural invariants of a training run."""

    def __init__(self, ghost_every: int = 10):
        self.ghost_every = ghost_every
        self.steps = 0
        self.max_norm_err = 0.0
        self.max_k_eff = 0
        self.ghost_checks = 0
        self.ghost_alive_max = 0.0

    def __call__(self, trainer: Trainer, res) -> None:
        q = trainer.model.ltt
        self.steps += 1
        self.max_norm_err = max(self.max_norm_err, float(np.max(np.abs(np.linalg.norm(q.W_dec, axis=0) - 1.0))))
        self.max_k_eff = max(self.max_k_eff, int(res.mask.sum(axis=1).max()))
        if self.steps % self.ghost_every == 0:
            dead = trainer.tracker.dead_mask()
            if dead.any() and not dead.all():
                centered = res.H_lat - q.mu
                g = ghost_grad(centered @ q.W_enc.T + q.b_enc, centered, dead, res.residual, q)
                alive = ~dead
                worst = max(float(np.abs(g["W_enc"][alive]).max()), float(np.abs(g["b_enc"][alive]).max()),
                            float(np.abs(g["W_dec"][:, alive]).max()))
                self.ghost_alive_max = max(self.ghost_alive_max, worst)
                self.ghost_checks += 1


def fit(train, cfg: TrainConfig, on_step=None):
    tr_, val = split_validation(train, cfg.val_fraction, cfg.seed)
    trainer = Trainer.create(tr_, cfg)
    trainer.on_step = on_step
    start = time.perf_counter()
    trainer.fit(tr_, val)
    return trainer, time.perf_counter() - start


# ---------------------------------------------------------------- shared runs

@pytest.fixture(scope="module")
def desk_data():
    train = generate_dataset(split(DESK_TRAIN), Rng(2024).spawn(0))
    test = generate_dataset(split(DESK_TEST), Rng(2024).spawn(1))
    return train, test


@pytest.fixture(scope="module")
def desk_sparse(desk_data):
    watch = InvariantWatch()
    trainer, seconds = fit(desk_data[0], DESK_CFG, watch)
    model = trainer.best_model
    return model, seconds, watch, evaluate(model, desk_data[1])


@pytest.fixture(scope="module")
def desk_dense(desk_data):
    trainer, seconds = fit(desk_data[0], replace(DESK_CFG, disable_sparse=True))
    return trainer.best_model, evaluate(trainer.best_model, desk_data[1])


@pytest.fixture(scope="module")
def solved(desk_sparse, desk_data):
    """At least 200 problems the desk model solves, topped up from fresh draws."""
    model = desk_sparse[0]
    pool = [p for p in desk_data[1] if solve(model, p).correct]
    extra_seed = 0
    while len(pool) < 200 and extra_seed < 10:
        more = generate_dataset(split(DESK_TEST), Rng(3030 + extra_seed))
        pool += [p for p in more if solve(model, p).correct]
        extra_seed += 1
    return pool


# ---------------------------------------------------------------- criteria

def test_c01_gradient_correctness():
    start = time.perf_counter()
    failures, checked, covered, worst = [], 0, set(), 0.0
    for seed in range(20):
        rng = Rng(seed)
        # every fifth instance drops the skip path, every fourth the sparsity
        cfg = TrainConfig(d_model=6, alpha=4, k=5, r=1 + seed % 3, seed=seed, disable_skip=seed % 5 == 4,
                          disable_sparse=seed % 4 == 3, dense_activation="relu" if seed % 8 == 7 else "linear")
        probs = generate_dataset({1: 2, 2: 1}, rng)
        model = build_model(probs, cfg, rng)
        for v in model.params().values():
            v += rng.normal(v.shape, 0.1)  # move W_skip and friends off their init
        if cfg.disable_skip:
            model.ltt.W_skip[...] = 0.0
        batch = make_batch([build_training_sequence(p, model.trajectory(p), rng) for p in probs], cfg.d_model)
        dead = np.zeros(cfg.d_feat, dtype=bool)
        dead[rng.permutation(cfg.d_feat)[:10]] = True
        rep = check_gradients(model, batch, cfg, dead, rng)
        failures += rep.failures
        checked += rep.checked
        worst = max(worst, rep.max_rel_error)
        covered |= {k for k, n in rep.per_tensor.items() if n > 0}
    seconds = time.perf_counter() - start
    needed = set(BACKBONE_KEYS) | {"W_enc", "b_enc", "W_dec", "b_dec", "W_skip"}
    ok = not failures and needed <= covered and seconds < 30
    record(1, ok, f"20 instances, {checked} coords, max rel err {worst:.1e}, "
                  f"{len(failures)} failures, missing {sorted(needed - covered)}, {seconds:.1f}s")
    assert ok


def test_c02_invariants_during_training(desk_sparse):
    _, _, watch, _ = desk_sparse
    init = build_model(generate_dataset({2: 4}, Rng(1)), DESK_CFG, Rng(2))
    no_skip_cfg = replace(DESK_CFG, disable_skip=True, epochs=2)
    small = generate_dataset(split(300), Rng(4))
    trainer, _ = fit(small, no_skip_cfg)
    skip_zero = not init.ltt.W_skip.any() and not trainer.model.ltt.W_skip.any()
    ok = (watch.max_norm_err < 1e-6 and watch.max_k_eff <= DESK_CFG.k and skip_zero
          and watch.ghost_checks > 0 and watch.ghost_alive_max == 0.0)
    record(2, ok, f"{watch.steps} steps, max |norm-1| {watch.max_norm_err:.1e}, max k_eff {watch.max_k_eff}, "
                  f"W_skip zero {skip_zero}, ghost on alive {watch.ghost_alive_max} over {watch.ghost_checks} checks")
    assert ok


def test_c03_sqrt_pool_variance():
    rng = Rng(11)
    blocks = rng.normal((100_000, 9, 1))
    pooled = np.array([sqrt_pool(b, 9)[0] for b in blocks])
    var = float(pooled.var())
    ok = abs(var - 1.0) <= 0.02
    record(3, ok, f"pooled variance {var:.4f} (target 1 +/- 0.02)")
    assert ok


def test_c04_fvu_calibration():
    rng = Rng(12)
    z = rng.normal((256, 16)) * 3.0 + 1.5
    zero = fvu_loss(z.copy(), z)
    mean = fvu_loss(np.broadcast_to(z.mean(axis=0), z.shape), z)
    z_hat = z + rng.normal(z.shape)
    base = fvu_loss(z_hat, z)
    drift = max(abs(fvu_loss(c * z_hat, c * z) - base) for c in (1e-3, 0.5, 7.0, 1e4))
    ok = zero == 0.0 and abs(mean - 1.0) <= 1e-9 and drift <= 1e-12
    record(4, ok, f"fvu(z*)={zero}, fvu(mean)={mean:.12f}, rescale drift {drift:.1e}")
    assert ok


def test_c05_desk_learning(desk_sparse, desk_dense):
    _, seconds, _, (acc, mean_L) = desk_sparse
    _, (dense_acc, _) = desk_dense
    ok = acc >= 0.85 and acc >= dense_acc - 0.05 and seconds < DESK_BUDGET_S
    record(5, ok, f"sparse test acc {acc:.3f} (need >= 0.85), dense {dense_acc:.3f} (gap {dense_acc - acc:+.3f}, "
                  f"need <= 0.05), train time {seconds:.0f}s (need < {DESK_BUDGET_S}s), mean_L {mean_L:.2f}")
    assert ok


def test_c06_k_sweep(desk_sparse, desk_data):
    model = desk_sparse[0]
    grid = [1, 2, 4, 8, 16, 32]
    rows = run_k_sweep(model, desk_data[1], grid)
    accs = [a for _, a, _ in rows]
    Ls = [L for _, _, L in rows]
    rho = spearman(grid, accs)
    spread = (max(Ls) - min(Ls)) / float(np.mean(Ls))
    ok = rho >= 0.7 and spread < 0.10
    record(6, ok, f"Spearman {rho:.3f} (need >= 0.7), mean_L spread {spread:.1%} (need < 10%), "
                  f"acc {[round(a, 3) for a in accs]}")
    assert ok


def test_c07_r_sweep(desk_data, desk_sparse):
    # desk scale: at the smaller setting the r=1 model stops well short of its trajectory
    train, test = desk_data
    results = {DESK_CFG.r: desk_sparse[3]}
    for r in (1, 2, 4):
        if r not in results:
            trainer, _ = fit(train, replace(DESK_CFG, r=r))
            results[r] = evaluate(trainer.best_model, test)
    Ls = [results[r][1] for r in (1, 2, 4)]
    ok = Ls[0] > Ls[1] > Ls[2]
    record(7, ok, "mean_L by r " + ", ".join(f"r={r}: {results[r][1]:.2f} (acc {results[r][0]:.3f})"
                                              for r in (1, 2, 4)))
    assert ok


def test_c08_skip_pathway_gini():
    test = generate_dataset(split(SMALL_TEST), Rng(88).spawn(1))
    wins, pairs = 0, []
    for seed in range(5):
        train = generate_dataset(split(SMALL_TRAIN), Rng(88 + seed).spawn(0))
        ginis = []
        for disable_skip in (False, True):
            cfg = replace(DESK_CFG, seed=seed, epochs=SMALL_EPOCHS, disable_skip=disable_skip)
            model = fit(train, cfg)[0].best_model
            traces = [latent_rollout(model, p.question_tokens) for p in test]
            ginis.append(an.feature_stats(traces, model.ltt.d_feat).gini)
        pairs.append(tuple(round(g, 3) for g in ginis))
        wins += ginis[0] > ginis[1]
    ok = wins >= 4
    record(8, ok, f"full > no-skip Gini in {wins}/5 seeds (need >= 4): {pairs}")
    assert ok


def test_c09_front_loading(desk_sparse, solved):
    model = desk_sparse[0]
    records = an.stepwise_ablation(model, solved)
    first = [r.flipped for r in records if r.position < 1 / 3]
    last = [r.flipped for r in records if r.position > 2 / 3]
    f_rate = float(np.mean(first)) if first else math.nan
    l_rate = float(np.mean(last)) if last else math.nan
    ok = len(solved) >= 200 and bool(first) and bool(last) and f_rate >= l_rate
    record(9, ok, f"{len(solved)} solved traces, flip rate first tercile {f_rate:.3f} vs last {l_rate:.3f}")
    assert ok


def test_c10_intervention(desk_sparse, solved):
    model = desk_sparse[0]
    identical, flips, usable = 0, 0, 0
    for p in solved:
        clean = latent_rollout(model, p.question_tokens)
        feat = an.top_feature(clean.steps[0].code)
        if feat is None:
            continue
        usable += 1
        a, b = an.intervene_feature(model, p.question_tokens, an.InterventionSpec(0, feat, "amplify", 1.0))
        identical += an.traces_equal(a, b)
        _, ablated = an.intervene_feature(model, p.question_tokens, an.InterventionSpec(0, feat, "ablate"))
        flips += list(ablated.answer_tokens) != list(p.answer_tokens)
    rate = flips / len(solved) if solved else 0.0
    ok = usable > 0 and identical == usable and rate >= 0.10
    record(10, ok, f"gamma=1 bit-exact {identical}/{usable}, top-feature ablation flips {rate:.3f} "
                   f"of {len(solved)} solved (need >= 0.10)")
    assert ok


def test_c11_cli_determinism(desk_sparse, tmp_path):
    ckpt = tmp_path / "desk.ckpt"
    save_model(desk_sparse[0], DESK_CFG, ckpt)
    tiny = ["--d-model", "8", "--alpha", "4", "--k", "4", "--epochs", "2", "--count", "80"]
    runs = []
    for run in ("a", "b"):
        root = tmp_path / run
        commands = [
            ["gen-data", "--count", "200", "--seed", "5", "--out", str(root / "data.jsonl")],
            ["train", "--seed", "5", *tiny, "--out", str(root / "train")],
            ["eval", "--ckpt", str(ckpt), "--count", "40", "--traces", "--out", str(root / "eval")],
            ["sweep-k", "--ckpt", str(ckpt), "--count", "40", "--grid", "1,8,32", "--out", str(root / "sk")],
            ["sweep-r", "--seed", "5", *tiny, "--r-grid", "1,2", "--test-count", "10", "--out", str(root / "sr")],
            ["analyze", "--ckpt", str(ckpt), "--count", "40", "--out", str(root / "an")],
            ["intervene", "--ckpt", str(ckpt), "--count", "10", "--index", "3", "--feature", "5", "--mode", "set",
             "--value", "2.5", "--out", str(root / "iv")],
            ["ablate-steps", "--ckpt", str(ckpt), "--count", "40", "--out", str(root / "ab")],
        ]
        codes = [cli_main(argv) for argv in commands]
        files = sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".json", ".jsonl"))
        runs.append((codes, {p.relative_to(root): p.read_bytes() for p in files}))
    (codes_a, out_a), (codes_b, out_b) = runs
    differing = [str(k) for k in out_a if out_a[k] != out_b.get(k)]
    ok = codes_a == codes_b == [0] * len(codes_a) and out_a.keys() == out_b.keys() and not differing
    record(11, ok, f"{len(out_a)} CSV/JSON outputs over {len(codes_a)} subcommands, exit codes {codes_a}, "
                   f"differing {differing}")
    assert ok
