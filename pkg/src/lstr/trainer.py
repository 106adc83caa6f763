"""Supervised training loop: grouped AdamW, global clipping, dead-feature tracking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ltt
from .checkpoint import CheckpointError, read_container, write_container
from .config import TrainConfig
from .inference import evaluate
from .model import BACKBONE_KEYS, LstrModel, batch_loss, build_model, make_batch, self_fed_inputs
from .numerics import Rng
from .taskgen import VOCAB, Problem, Vocab
from .trajectory import LatentTrajectory, build_training_sequence

log = logging.getLogger(__name__)

GROUPS = {
    "backbone": BACKBONE_KEYS,
    "skip": ("W_skip",),
    "encoder": ("W_enc", "b_enc"),
    "decoder": ("W_dec", "b_dec"),
}
BETAS = (0.9, 0.999)
EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: LstrModel | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptState,
               lr: float, wd: float) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r} at step {opt.step + 1}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {params[name].shape}")
    opt.step += 1
    b1, b2 = BETAS
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, g in grads.items():
        p = params[name]
        m = opt.m.setdefault(name, np.zeros_like(p))
        v = opt.v.setdefault(name, np.zeros_like(p))
        if wd:
            p *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0) -> tuple[dict[str, np.ndarray], float]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class DeadFeatureTracker:
    def __init__(self, d_feat: int, threshold: int):
        self.steps_since_fire = np.zeros(d_feat, dtype=np.int64)
        self.threshold = threshold

    def update(self, fired) -> None:
        """``fired``: boolean per feature, or a list of SparseCodes from one batch."""
        if isinstance(fired, (list, tuple)):
            mask = np.zeros(len(self.steps_since_fire), dtype=bool)
            for code in fired:
                mask[code.active_indices] = True
            fired = mask
        fired = np.asarray(fired, dtype=bool)
        self.steps_since_fire += 1
        self.steps_since_fire[fired] = 0

    def dead_mask(self) -> np.ndarray:
        return self.steps_since_fire >= self.threshold


def split_validation(problems: list[Problem], fraction: float, seed: int) -> tuple[list[Problem], list[Problem]]:
    n_val = int(round(len(problems) * fraction))
    if n_val == 0:
        return list(problems), []
    order = Rng(seed).spawn(7).permutation(len(problems))
    val = sorted(order[:n_val].tolist())
    val_set = set(val)
    return [p for i, p in enumerate(problems) if i not in val_set], [problems[i] for i in val]


@dataclass
class EpochMetrics:
    epoch: int
    fvu: float
    skip: float
    ghost: float
    token_ce: float
    total: float
    dead_fraction: float
    max_decoder_norm_error: float
    val_accuracy: float | None = None
    val_mean_L: float | None = None
    ce_trace: list[float] = field(default_factory=list, repr=False)


class Trainer:
    def __init__(self, model: LstrModel, cfg: TrainConfig, rng: Rng):
        self.model = model
        self.cfg = cfg
        self.rng = rng
        self.opt = {g: OptState() for g in GROUPS}
        self.tracker = DeadFeatureTracker(model.ltt.d_feat, cfg.dead_threshold)
        self.epoch = 0
        self.history: list[EpochMetrics] = []
        self.best_accuracy = -1.0
        self.best_epoch = -1
        self.best_model: LstrModel | None = None
        self.max_norm_error = 0.0
        self.on_step = None  # optional callback(trainer, batch_result) for instrumentation
        self._trajs: dict[int, LatentTrajectory] = {}
        self.steps_per_epoch = 0

    @classmethod
    def create(cls, train_problems: list[Problem], cfg: TrainConfig, vocab: Vocab = VOCAB) -> "Trainer":
        root = Rng(cfg.seed)
        model = build_model(train_problems, cfg, root.spawn(0), vocab)
        return cls(model, cfg, root.spawn(1))

    def _trajectory(self, p: Problem) -> LatentTrajectory:
        key = hash(p)
        traj = self._trajs.get(key)
        if traj is None:
            traj = self._trajs[key] = self.model.trajectory(p)
        return traj

    def lr_factor(self) -> float:
        """Multiplier applied to every group's learning rate at the current step."""
        cfg = self.cfg
        total = cfg.epochs * self.steps_per_epoch
        if cfg.lr_schedule == "constant" or total <= 0:
            return 1.0
        frac = min(self.opt["backbone"].step / total, 1.0)
        return cfg.lr_min_factor + (1 - cfg.lr_min_factor) * 0.5 * (1 + math.cos(math.pi * frac))

    def train_step(self, problems: list[Problem]):
        cfg, model = self.cfg, self.model
        seqs = [build_training_sequence(p, self._trajectory(p), self.rng, model.vocab) for p in problems]
        batch = make_batch(seqs, cfg.d_model)
        if cfg.self_feed_prob > 0:
            rows = np.flatnonzero(self.rng.generator.random(len(seqs)) < cfg.self_feed_prob)
            if rows.size:
                batch.latent_inputs = self_fed_inputs(model, batch, rows)
        if cfg.latent_noise_std > 0:
            slots = batch.slot_mask
            batch.latent_inputs[slots] += self.rng.normal((int(slots.sum()), cfg.d_model), cfg.latent_noise_std)
        dead = self.tracker.dead_mask() if not model.dense else None
        res = batch_loss(model, batch, cfg, dead_mask=dead)
        if not math.isfinite(res.loss.total):
            raise FloatingPointError("total loss is not finite")
        grads = res.grads
        if cfg.disable_skip:
            grads.pop("W_skip")
        if cfg.decoder_grad_projection:
            grads["W_dec"] = ltt.remove_parallel_decoder_grad(model.ltt.W_dec, grads["W_dec"])
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        params = model.params()
        f = self.lr_factor()
        lr_wd = {
            "backbone": (f * cfg.lr_backbone, cfg.wd_backbone),
            "skip": (f * cfg.lr_skip, cfg.wd_skip),
            "encoder": (f * cfg.lr_encoder, cfg.wd_encoder),
            "decoder": (f * cfg.lr_decoder, cfg.wd_decoder),
        }
        for group, names in GROUPS.items():
            g = {n: grads[n] for n in names if n in grads}
            if g:
                adamw_step(params, g, self.opt[group], *lr_wd[group])
        ltt.project_decoder_columns(model.ltt, self.rng)
        err = float(np.max(np.abs(np.linalg.norm(model.ltt.W_dec, axis=0) - 1.0)))
        self.max_norm_error = max(self.max_norm_error, err)
        self.tracker.update(res.mask.any(axis=0))
        if cfg.mu_mode == "running":
            mom = cfg.mu_momentum
            model.ltt.mu = mom * model.ltt.mu + (1.0 - mom) * res.H_lat.mean(axis=0)
        if self.on_step is not None:
            self.on_step(self, res)
        return res

    def train_epoch(self, problems: list[Problem]) -> EpochMetrics:
        cfg = self.cfg
        order = self.rng.permutation(len(problems))
        self.steps_per_epoch = math.ceil(len(problems) / cfg.batch_size)
        sums = np.zeros(5)
        ce_trace = []
        n_batches = 0
        last_good = self.model.copy()
        for start in range(0, len(problems), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                res = self.train_step([problems[i] for i in idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {self.epoch + 1}: {exc}", last_good) from exc
            loss = res.loss
            sums += [loss.fvu, loss.skip, loss.ghost, loss.token_ce, loss.total]
            ce_trace.append(loss.token_ce)
            n_batches += 1
        self.epoch += 1
        means = sums / max(n_batches, 1)
        metrics = EpochMetrics(
            self.epoch, *means.tolist(),
            dead_fraction=float(self.tracker.dead_mask().mean()),
            max_decoder_norm_error=self.max_norm_error,
            ce_trace=ce_trace,
        )
        return metrics

    def fit(self, train: list[Problem], val: list[Problem] | None = None, epochs: int | None = None,
            out_dir: str | Path | None = None) -> list[EpochMetrics]:
        """Train until ``epochs`` total epochs, keeping the best-validation model."""
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            m = self.train_epoch(train)
            if val:
                m.val_accuracy, m.val_mean_L = evaluate(self.model, val)
                if m.val_accuracy > self.best_accuracy:
                    self.best_accuracy = m.val_accuracy
                    self.best_epoch = self.epoch
                    self.best_model = self.model.copy()
                    if out_dir is not None:
                        save_model(self.best_model, self.cfg, Path(out_dir) / "best.ckpt")
            self.history.append(m)
            log.info("epoch %d total=%.4f fvu=%.4f ce=%.4f val_acc=%s", m.epoch, m.total, m.fvu, m.token_ce,
                     m.val_accuracy)
            if out_dir is not None:
                self.save(Path(out_dir) / "last.ckpt")
        if self.best_model is None:
            self.best_model = self.model.copy()
        return self.history

    # checkpointing

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "trainer",
            "config": self.cfg.to_dict(),
            "vocab": self.model.vocab.tokens,
            "r": self.model.r,
            "k": self.model.ltt.k,
            "dense": self.model.dense,
            "rng": self.rng.get_state(),
            "epoch": self.epoch,
            "opt_steps": {g: s.step for g, s in self.opt.items()},
            "best_accuracy": self.best_accuracy,
            "best_epoch": self.best_epoch,
            "max_norm_error": self.max_norm_error,
            "history": [_metrics_json(m) for m in self.history],
        }
        tensors = _model_tensors(self.model)
        for g, s in self.opt.items():
            for n in sorted(s.m):
                tensors[f"opt.{g}.m.{n}"] = s.m[n]
                tensors[f"opt.{g}.v.{n}"] = s.v[n]
        tensors["tracker"] = self.tracker.steps_since_fire.astype(np.float64)
        if self.best_model is not None:
            tensors.update({f"best.{k}": v for k, v in _model_tensors(self.best_model).items()})
        write_container(path, meta, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "Trainer":
        meta, tensors = read_container(path)
        if meta.get("kind") != "trainer":
            raise CheckpointError(f"{path} is not a trainer checkpoint")
        cfg = TrainConfig.from_dict(meta["config"])
        model = _model_from(meta, tensors, "")
        tr = cls(model, cfg, Rng.from_state(meta["rng"]))
        tr.epoch = meta["epoch"]
        for g, s in tr.opt.items():
            s.step = meta["opt_steps"][g]
            for key, val in tensors.items():
                prefix = f"opt.{g}."
                if key.startswith(prefix):
                    kind, name = key[len(prefix):].split(".", 1)
                    (s.m if kind == "m" else s.v)[name] = val
        tr.tracker.steps_since_fire = tensors["tracker"].astype(np.int64)
        tr.best_accuracy = meta["best_accuracy"]
        tr.best_epoch = meta["best_epoch"]
        tr.max_norm_error = meta["max_norm_error"]
        tr.history = [EpochMetrics(**h) for h in meta["history"]]
        if "best.W_enc" in tensors:
            tr.best_model = _model_from(meta, tensors, "best.")
        return tr


def _metrics_json(m: EpochMetrics) -> dict:
    d = dict(m.__dict__)
    d["ce_trace"] = list(m.ce_trace)
    return d


def _model_tensors(model: LstrModel) -> dict[str, np.ndarray]:
    out = dict(model.params())
    out["mu"] = model.ltt.mu
    out["target_embed"] = model.target_embed
    out["embed_variance"] = np.atleast_1d(np.asarray(model.embed_variance, dtype=np.float64))
    return out


def _model_from(meta: dict, tensors: dict[str, np.ndarray], prefix: str) -> LstrModel:
    from .backbone import BackboneParams

    t = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    backbone = BackboneParams(**{k: t[k] for k in BACKBONE_KEYS})
    params = ltt.LttParams(t["W_enc"], t["b_enc"], t["W_dec"], t["b_dec"], t["W_skip"], t["mu"], int(meta["k"]))
    var = t["embed_variance"]
    var = float(var[0]) if var.shape == (1,) else var
    return LstrModel(backbone, params, t["target_embed"], var, int(meta["r"]), meta["dense"],
                     Vocab(meta["vocab"]))


def save_model(model: LstrModel, cfg: TrainConfig, path: str | Path) -> None:
    meta = {"kind": "model", "config": cfg.to_dict(), "vocab": model.vocab.tokens, "r": model.r,
            "k": model.ltt.k, "dense": model.dense}
    write_container(path, meta, _model_tensors(model))


def load_model(path: str | Path) -> tuple[LstrModel, TrainConfig]:
    meta, tensors = read_container(path)
    if meta.get("kind") == "trainer":
        prefix = "best." if "best.W_enc" in tensors else ""
    elif meta.get("kind") == "model":
        prefix = ""
    else:
        raise CheckpointError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    return _model_from(meta, tensors, prefix), TrainConfig.from_dict(meta["config"])


def train_model(problems: list[Problem], cfg: TrainConfig, val: list[Problem] | None = None,
                out_dir: str | Path | None = None) -> Trainer:
    """Split off a validation set when none is given, build, and fit."""
    if val is None:
        problems, val = split_validation(problems, cfg.val_fraction, cfg.seed)
    trainer = Trainer.create(problems, cfg)
    trainer.fit(problems, val, out_dir=out_dir)
    return trainer
