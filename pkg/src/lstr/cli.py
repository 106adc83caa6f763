"""Command-line entry point: ``python -m lstr <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines. Keys
are training-config fields or the subcommand's own option names (dashes
written as underscores). Flags given on the command line override the file.
The fully resolved settings are written as ``resolved.cfg`` in the output
directory, and that file alone reproduces the run.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from .config import TrainConfig, _coerce, format_config, parse_config_text

log = logging.getLogger("lstr")

DEFAULT_STEPS = "2,3,4"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- option tables

# subcommand -> {option: (type, default, help)}
_COMMON = {
    "seed": (int, None, "random seed (falls back to $LSTR_SEED, then 0)"),
    "out": (str, None, "output directory (default runs/<timestamp>_seed<seed>)"),
    "threads": (int, 1, "cap on BLAS worker threads"),
}
_DATA = {
    "data": (str, None, "problems JSONL; generated when absent"),
    "steps": (str, DEFAULT_STEPS, "comma-separated chain lengths for generated data"),
    "count": (int, 500, "number of generated problems"),
    "data_seed": (int, None, "seed for generated data (default: --seed)"),
}
_CKPT = {"ckpt": (str, None, "model or trainer checkpoint")}

_OPTIONS: dict[str, dict] = {
    "gen-data": {**_COMMON, **{k: v for k, v in _DATA.items() if k != "data"}},
    "train": {**_COMMON, **_DATA, "count": (int, 5000, "number of generated training problems")},
    "eval": {**_COMMON, **_DATA, **_CKPT, "k": (int, None, "inference-time sparsity override"),
             "traces": (bool, False, "also write traces.jsonl")},
    "sweep-k": {**_COMMON, **_DATA, **_CKPT, "grid": (str, "1,2,4,8,16,32", "comma-separated k values")},
    "sweep-r": {**_COMMON, **_DATA, "count": (int, 5000, "number of generated training problems"),
                "test_data": (str, None, "evaluation JSONL; generated when absent"),
                "test_count": (int, 500, "number of generated test problems"),
                "r_grid": (str, "1,2,4", "comma-separated compression ratios")},
    "analyze": {**_COMMON, **_DATA, **_CKPT, "k": (int, None, "inference-time sparsity override"),
                "persistence": (str, "jaccard", "jaccard or overlap_k")},
    "intervene": {**_COMMON, **_DATA, **_CKPT, "index": (int, 0, "problem index within the data"),
                  "step": (int, 0, "latent step to intervene on"),
                  "feature": (int, None, "feature id (default: top feature at that step)"),
                  "mode": (str, "ablate", "ablate, amplify or set"),
                  "value": (float, 1.0, "gamma for amplify or the value for set")},
    "ablate-steps": {**_COMMON, **_DATA, **_CKPT, "bins": (int, 10, "histogram bins"),
                     "mode": (str, "sparse", "sparse or full"),
                     "limit": (int, None, "use at most this many problems")},
}
_TRAINS = {"train", "sweep-r"}
_HELP = {
    "gen-data": "generate synthetic chain problems as JSONL",
    "train": "train a model and write checkpoints plus per-epoch metrics",
    "eval": "evaluate a checkpoint by latent rollout",
    "sweep-k": "accuracy and latent length across inference-time k",
    "sweep-r": "train one model per compression ratio and evaluate each",
    "analyze": "sparsity, persistence and dictionary-usage statistics",
    "intervene": "single-feature intervention on one problem",
    "ablate-steps": "step-wise sparse-path ablation and necessity profile",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lstr", description="Sparse latent-transition reasoning laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for cmd, opts in _OPTIONS.items():
        p = sub.add_parser(cmd, help=_HELP[cmd], description=_HELP[cmd])
        p.add_argument("--config", help="key = value run-config file")
        for name, (typ, default, help_) in opts.items():
            if typ is bool:
                p.add_argument(_flag(name), dest=name, action="store_true", default=None, help=help_)
            else:
                shown = help_ if default is None else f"{help_} (default {default})"
                p.add_argument(_flag(name), dest=name, type=typ, default=None, help=shown)
        if cmd in _TRAINS:
            g = p.add_argument_group("training config")
            for f in fields(TrainConfig):
                if f.name == "seed":
                    continue
                if f.type in ("bool", bool):
                    g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=lambda s: _coerce(s, bool),
                                   default=None, metavar="BOOL", help=f"default {f.default}")
                else:
                    g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", type=lambda s, t=f.type: _coerce(s, t),
                                   default=None, metavar=str(f.type).upper(), help=f"default {f.default}")
    return parser


def resolve(ns: argparse.Namespace) -> tuple[dict, TrainConfig | None]:
    """Merge defaults < config file < flags; returns (options, training config)."""
    cmd = ns.command
    opts_table = _OPTIONS[cmd]
    file_cfg, file_opts = {}, {}
    if ns.config:
        try:
            text = Path(ns.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
        extra_types = {k: v[0] for k, v in opts_table.items()}
        try:
            file_cfg, file_opts = parse_config_text(text, extra_types)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{ns.config}: {exc}") from exc
        if cmd not in _TRAINS:
            # model settings come from the checkpoint; a shared config may still list them
            for key, val in file_cfg.items():
                if key in opts_table:
                    file_opts.setdefault(key, opts_table[key][0](val) if val is not None else val)
            file_cfg = {}
    opts = {name: spec[1] for name, spec in opts_table.items()}
    opts.update(file_opts)
    if "seed" in file_cfg:
        opts["seed"] = file_cfg.pop("seed")
    for name in opts_table:
        val = getattr(ns, name, None)
        if val is not None:
            opts[name] = val
    if opts.get("seed") is None:
        env = os.environ.get("LSTR_SEED")
        try:
            opts["seed"] = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise UsageError(f"LSTR_SEED must be an integer, got {env!r}") from exc
    if opts.get("data_seed") is None:
        opts["data_seed"] = opts["seed"]

    cfg = None
    if cmd in _TRAINS:
        values = dict(file_cfg)
        for f in fields(TrainConfig):
            val = getattr(ns, f"cfg_{f.name}", None)
            if val is not None:
                values[f.name] = val
        values["seed"] = opts["seed"]
        try:
            cfg = TrainConfig(**values)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return opts, cfg


# ---------------------------------------------------------------- helpers

def _ints(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--{what} must be comma-separated integers") from exc
    if not vals:
        raise UsageError(f"--{what} is empty")
    return vals


def _out_dir(opts: dict) -> Path:
    if opts.get("out"):
        out = Path(opts["out"])
    else:
        out = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}_seed{opts['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cmd: str, opts: dict, cfg: TrainConfig | None, name: str = "resolved.cfg") -> None:
    lines = {k: v for k, v in opts.items() if v is not None and k != "out"}
    if cfg is not None:
        lines.update({k: v for k, v in cfg.to_dict().items() if k != "seed"})
    (out / name).write_text(f"# lstr {cmd}\n" + format_config(lines), encoding="utf-8")


def _split_counts(steps: list[int], count: int) -> dict[int, int]:
    base, rem = divmod(count, len(steps))
    return {s: base + (1 if i >= len(steps) - rem else 0) for i, s in enumerate(steps)}


def _problems(opts: dict, path_key: str = "data", count_key: str = "count", salt: int = 0):
    from .numerics import Rng
    from .taskgen import generate_dataset, load_jsonl

    if opts.get(path_key):
        probs = load_jsonl(opts[path_key])
        if not probs:
            raise ValueError(f"{opts[path_key]} contains no problems")
        return probs
    steps = _ints(opts["steps"], "steps")
    if opts[count_key] < 1:
        raise UsageError(f"--{count_key.replace('_', '-')} must be >= 1")
    return generate_dataset(_split_counts(steps, opts[count_key]), Rng(opts["data_seed"]).spawn(salt))


def _load(opts: dict):
    from .trainer import load_model

    if not opts.get("ckpt"):
        raise UsageError("--ckpt is required")
    return load_model(opts["ckpt"])


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(opts, cfg, out: Path) -> None:
    from .taskgen import save_jsonl

    probs = _problems(opts)
    target = opts["_file"] if opts.get("_file") else out / "data.jsonl"
    save_jsonl(probs, target)
    print(f"wrote {len(probs)} problems to {target}")


def _train_one(train, cfg: TrainConfig, out: Path):
    from .trainer import split_validation, Trainer

    tr_set, val = split_validation(train, cfg.val_fraction, cfg.seed)
    trainer = Trainer.create(tr_set, cfg)
    trainer.fit(tr_set, val, out_dir=out)
    rows = [[m.epoch, _fmt(m.total), _fmt(m.fvu), _fmt(m.skip), _fmt(m.ghost), _fmt(m.token_ce),
             _fmt(m.dead_fraction), _fmt(m.val_accuracy), _fmt(m.val_mean_L)] for m in trainer.history]
    _write_csv(out / "metrics.csv", ["epoch", "total", "fvu", "skip", "ghost", "token_ce", "dead_fraction",
                                     "val_accuracy", "val_mean_L"], rows)
    return trainer


def cmd_train(opts, cfg, out: Path) -> None:
    trainer = _train_one(_problems(opts), cfg, out)
    print(f"best_val_accuracy={trainer.best_accuracy!r} best_epoch={trainer.best_epoch} "
          f"checkpoint={out / 'best.ckpt'}")


def cmd_eval(opts, cfg, out: Path) -> None:
    from .inference import evaluate, write_traces_jsonl

    model, _ = _load(opts)
    probs = _problems(opts, salt=1)
    acc, mean_L, traces = evaluate(model, probs, opts["k"], return_traces=True)
    _write_csv(out / "metrics.csv", ["accuracy", "mean_L", "n"], [[repr(float(acc)), repr(mean_L), len(probs)]])
    if opts["traces"]:
        write_traces_jsonl(traces, out / "traces.jsonl")
    print(f"accuracy={acc!r} mean_L={mean_L!r}")


def cmd_sweep_k(opts, cfg, out: Path) -> None:
    from .inference import run_k_sweep, write_sweep_csv

    model, _ = _load(opts)
    grid = _ints(opts["grid"], "grid")
    if any(k < 0 or k > model.ltt.d_feat for k in grid):
        raise UsageError(f"every k must lie in [0, {model.ltt.d_feat}]")
    rows = run_k_sweep(model, _problems(opts, salt=1), grid)
    write_sweep_csv(rows, out / "sweep_k.csv", "k")
    for k, acc, L in rows:
        print(f"k={k} accuracy={acc!r} mean_L={L!r}")


def cmd_sweep_r(opts, cfg, out: Path) -> None:
    from .inference import evaluate, write_sweep_csv

    grid = _ints(opts["r_grid"], "r-grid")
    train = _problems(opts)
    test = _problems(opts, "test_data", "test_count", salt=1)
    rows = []
    for r in grid:
        sub = out / f"r{r}"
        sub.mkdir(exist_ok=True)
        trainer = _train_one(train, cfg.replace(r=r), sub)
        acc, L = evaluate(trainer.best_model, test)
        rows.append((r, acc, L))
        print(f"r={r} accuracy={acc!r} mean_L={L!r}")
    write_sweep_csv(rows, out / "sweep_r.csv", "r")


def cmd_analyze(opts, cfg, out: Path) -> None:
    from . import analysis as an
    from .inference import evaluate, write_traces_jsonl

    model, _ = _load(opts)
    probs = _problems(opts, salt=1)
    acc, mean_L, traces = evaluate(model, probs, opts["k"], return_traces=True)
    stats = an.feature_stats(traces, model.ltt.d_feat)
    an.write_rank_frequency_csv(stats, out / "rank_frequency.csv")

    k_by_step: list[list[int]] = []
    p_by_step: list[list[float]] = []
    for tr in traces:
        ks = an.effective_sparsity(tr) if tr.steps else []
        ps = an.feature_persistence(tr, opts["persistence"]) if len(ks) > 1 else []
        for t, k in enumerate(ks):
            if t == len(k_by_step):
                k_by_step.append([])
                p_by_step.append([])
            k_by_step[t].append(k)
            if t > 0:
                p_by_step[t].append(ps[t - 1])
    rows = []
    for t, ks in enumerate(k_by_step):
        ps = p_by_step[t]
        rows.append([t, repr(sum(ks) / len(ks)), repr(sum(ps) / len(ps)) if ps else ""])
    _write_csv(out / "step_metrics.csv", ["step", "k_eff", "persistence"], rows)

    correct = [t for t in traces if t.correct]
    wrong = [t for t in traces if not t.correct]
    summary = {
        "accuracy": acc,
        "mean_L": mean_L,
        "gini": stats.gini,
        "active_features": int((stats.activation_counts > 0).sum()),
        "d_feat": model.ltt.d_feat,
        "k_eff_profile_correct": an.mean_sparsity_profile(correct),
        "k_eff_profile_incorrect": an.mean_sparsity_profile(wrong),
    }
    _write_json(out / "summary.json", summary)
    write_traces_jsonl(traces, out / "traces.jsonl")
    print(f"accuracy={acc!r} mean_L={mean_L!r} gini={stats.gini!r}")


def cmd_intervene(opts, cfg, out: Path) -> None:
    from . import analysis as an
    from .inference import latent_rollout
    from .taskgen import oracle_answer

    model, _ = _load(opts)
    probs = _problems(opts, salt=1)
    if not 0 <= opts["index"] < len(probs):
        raise UsageError(f"--index must lie in [0, {len(probs)})")
    problem = probs[opts["index"]]
    feature = opts["feature"]
    if feature is None:
        clean = latent_rollout(model, problem.question_tokens)
        if opts["step"] >= clean.n_latent_steps:
            raise IndexError(f"step {opts['step']} beyond trace of length {clean.n_latent_steps}")
        feature = an.top_feature(clean.steps[opts["step"]].code)
        if feature is None:
            raise ValueError(f"no active feature at step {opts['step']}")
    spec = an.InterventionSpec(opts["step"], feature, opts["mode"], opts["value"])
    try:
        spec.validate(model.ltt.d_feat)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    before, after = an.intervene_feature(model, problem.question_tokens, spec)
    gold = oracle_answer(problem, model.vocab)
    before.correct = before.answer_tokens == gold
    after.correct = after.answer_tokens == gold
    changed = [t for t, (a, b) in enumerate(zip(before.active_sets(), after.active_sets())) if a != b]
    result = {
        "problem_index": opts["index"],
        "spec": {"step_index": spec.step_index, "feature_id": spec.feature_id, "mode": spec.mode,
                 "value": spec.value},
        "identical": an.traces_equal(before, after),
        "changed_steps": changed,
        "original": before.to_json(),
        "intervened": after.to_json(),
    }
    _write_json(out / "intervention.json", result)
    print(f"feature={feature} identical={result['identical']} original_correct={before.correct} "
          f"intervened_correct={after.correct}")


def cmd_ablate_steps(opts, cfg, out: Path) -> None:
    from . import analysis as an

    model, _ = _load(opts)
    probs = _problems(opts, salt=1)
    if opts["limit"] is not None:
        probs = probs[: opts["limit"]]
    if opts["mode"] not in ("sparse", "full"):
        raise UsageError("--mode must be sparse or full")
    records = an.stepwise_ablation(model, probs, mode=opts["mode"])
    if not records:
        raise ValueError("no correctly solved problems to ablate")
    profile = an.necessity_profile(records, opts["bins"])
    an.write_necessity_csv(profile, out / "necessity.csv")
    with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"problem_index": r.problem_index, "step": r.step, "n_steps": r.n_steps,
                                 "position": r.position, "flipped": r.flipped}, separators=(",", ":")) + "\n")
    n_traces = len({r.problem_index for r in records})
    rate = sum(r.flipped for r in records) / len(records)
    print(f"traces={n_traces} records={len(records)} flip_rate={rate!r}")


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-k": cmd_sweep_k,
    "sweep-r": cmd_sweep_r,
    "analyze": cmd_analyze,
    "intervene": cmd_intervene,
    "ablate-steps": cmd_ablate_steps,
}


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        opts, cfg = resolve(ns)
        if opts["threads"] < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(opts["threads"]):
            if ns.command == "gen-data" and str(opts.get("out") or "").endswith(".jsonl"):
                # --out names the data file itself; the resolved config sits beside it
                target = Path(opts["out"])
                target.parent.mkdir(parents=True, exist_ok=True)
                out = target.parent
                _write_resolved(out, ns.command, opts, cfg, name=target.name + ".cfg")
                opts = {**opts, "_file": target}
            else:
                out = _out_dir(opts)
                _write_resolved(out, ns.command, opts, cfg)
            _COMMANDS[ns.command](opts, cfg, out)
    except UsageError as exc:
        print(f"lstr {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"lstr {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
