"""Command-line driver: one experiment directory per config.

    afmrl <subcommand> --config run.cfg [--force] [--seed N]

The config is plain text, one ``section.key = value`` per line. Every stage
records its outputs and their sha256 in ``manifest.json`` and refuses to
overwrite them unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__, attrgen, corpus
from .corpus import ConfigError
from .embednet import load_encoder, save_encoder
from .pipeline import Experiment, ExperimentConfig, config_sections

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_EXISTS = 3


class CliError(Exception):
    code = EXIT_ERROR


class AlreadyExists(CliError):
    code = EXIT_EXISTS


class MissingPrerequisite(CliError):
    pass


# ---- config ---------------------------------------------------------------


@dataclass(frozen=True)
class RunSettings:
    out_dir: str = "runs/default"
    seed: int = 0
    # wall-clock columns break byte-identical reruns, so they stay empty by default
    record_wall_time: bool = False


def parse_config_text(text: str) -> list[tuple[int, str, str, str]]:
    """(line number, section, key, raw value) for every assignment line."""
    out = []
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, raw = (part.strip() for part in body.split("=", 1))
        if lhs.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {lhs!r} must look like section.key")
        section, key = lhs.split(".")
        if (section, key) in seen:
            raise ConfigError(f"line {lineno}: {lhs} already set on line {seen[(section, key)]}")
        seen[(section, key)] = lineno
        out.append((lineno, section, key, raw))
    return out


def coerce(raw: str, default, where: str):
    """Parse ``raw`` into the type of ``default``."""
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else int
            return tuple(elem(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def build_config(text: str, seed: int | None = None) -> tuple[ExperimentConfig, RunSettings]:
    """Defaults, then stage seeds derived from the run seed, then explicit lines."""
    entries = parse_config_text(text)
    run = RunSettings()
    rest = []
    for lineno, section, key, raw in entries:
        if section == "run":
            if key not in {f.name for f in fields(RunSettings)}:
                raise ConfigError(f"line {lineno}: unknown key run.{key}")
            run = replace(run, **{key: coerce(raw, getattr(run, key), f"line {lineno}")})
        else:
            rest.append((lineno, section, key, raw))
    if seed is not None:
        run = replace(run, seed=seed)
    cfg = ExperimentConfig().with_seed(run.seed)
    sections = config_sections(cfg)
    for lineno, section, key, raw in rest:
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        sub = sections[section]
        if key not in {f.name for f in fields(sub)}:
            raise ConfigError(f"line {lineno}: unknown key {section}.{key}")
        sub = replace(sub, **{key: coerce(raw, getattr(sub, key), f"line {lineno}")})
        sections[section] = sub
        cfg = replace(cfg, **{section: sub})
    cfg.validate()
    return cfg, run


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def render_config(cfg: ExperimentConfig, run: RunSettings) -> str:
    """Canonical text form listing every effective value."""
    lines = [f"run.{f.name} = {_fmt(getattr(run, f.name))}" for f in fields(RunSettings)]
    for section, sub in config_sections(cfg).items():
        lines += [f"{section}.{f.name} = {_fmt(getattr(sub, f.name))}" for f in fields(sub)]
    return "\n".join(lines) + "\n"


def config_snapshot(cfg: ExperimentConfig, run: RunSettings) -> dict:
    snap = {"run": {f.name: getattr(run, f.name) for f in fields(RunSettings) if f.name != "out_dir"}}
    for section, sub in config_sections(cfg).items():
        snap[section] = {f.name: _jsonable(getattr(sub, f.name)) for f in fields(sub)}
    return snap


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


# ---- experiment directory ---------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    return {"afmrl": __version__, "python": platform.python_version(), "numpy": np.__version__}


class RunDir:
    """Experiment directory with an append-only manifest and a lock file."""

    def __init__(self, path: Path):
        self.path = path
        self.manifest_path = path / "manifest.json"

    def read(self) -> dict:
        with open(self.manifest_path) as f:
            return json.load(f)

    def _write(self, manifest: dict) -> None:
        tmp = self.manifest_path.with_suffix(".json.tmp")
        with open(tmp, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, self.manifest_path)

    def ensure_manifest(self, snapshot: dict, config_text: str) -> None:
        if self.manifest_path.exists():
            if self.read()["config"] != snapshot:
                raise CliError(f"{self.path} was created with a different config; "
                               "use a fresh run.out_dir")
            return
        (self.path / "config.txt").write_text(config_text)
        self._write({"config": snapshot, "versions": _versions(), "events": [], "artifacts": {}})

    @contextmanager
    def lock(self):
        lock_path = self.path / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.path} is locked by another run (delete {lock_path} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock_path.unlink(missing_ok=True)

    def stage_done(self, stage: str) -> bool:
        status = [e["status"] for e in self.read()["events"] if e["stage"] == stage]
        return bool(status) and status[-1] == "done"

    def record(self, stage: str, status: str, outputs: Iterable[Path] = (), message: str = "") -> None:
        manifest = self.read()
        event = {"stage": stage, "status": status}
        sums = {str(p.relative_to(self.path)): sha256_file(p) for p in outputs}
        if sums:
            event["outputs"] = sums
            manifest["artifacts"].update(sums)
        if message:
            event["message"] = message
        manifest["events"].append(event)
        self._write(manifest)

    def need(self, name: str, producer: str) -> Path:
        p = self.path / name
        if not p.exists():
            raise MissingPrerequisite(f"{p} not found; run 'afmrl {producer}' first")
        return p


# ---- csv --------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


EVAL_HEADER = ("task", "metric", "k", "value", "n_queries", "seed")


# ---- stages -----------------------------------------------------------------


def load_run_universe(path: Path):
    """Load with the default schema when it covers the file, so vocabularies match generation."""
    universe = corpus.load_universe(path)
    default = corpus.AttributeSchema.default()
    fits = all(set(p.attributes) == set(default.keys)
               and all(v in default.values_per_key[k] for k, v in p.attributes.items())
               for p in universe.products)
    return corpus.ProductUniverse(default, universe.products) if fits else universe


class Context:
    def __init__(self, cfg: ExperimentConfig, run: RunSettings, rundir: RunDir):
        self.cfg = cfg
        self.run = run
        self.dir = rundir
        self._ex: Experiment | None = None

    def out(self, name: str) -> Path:
        return self.dir.path / name

    @property
    def ex(self) -> Experiment:
        if self._ex is None:
            universe = load_run_universe(self.dir.need("universe.jsonl", "gen-corpus"))
            pairs = corpus.load_pairs(self.dir.need("pairs.jsonl", "gen-corpus"))
            self._ex = Experiment(self.cfg, universe, pairs)
        return self._ex

    def encoder(self, name: str):
        producer = "cit" if name == "cit" else f"train-encoder --mode {name}"
        return load_encoder(self.dir.need(f"encoder_{name}.json", producer))

    def policy(self, name: str):
        if name == "none":
            return None
        producer = {"sft": "sft-generator", "rl": "rl-generator"}[name]
        return attrgen.load_policy(self.dir.need(f"policy_{name}.json", producer))


def cmd_gen_corpus(ctx: Context, args) -> list[Path]:
    ex = Experiment(ctx.cfg)
    corpus.save_universe(ex.universe, ctx.out("universe.jsonl"))
    corpus.save_pairs(ex.pairs, ctx.out("pairs.jsonl"))
    with open(ctx.out("split.json"), "w") as f:
        json.dump(ex.split, f, separators=(",", ":"))
        f.write("\n")
    return [ctx.out("universe.jsonl"), ctx.out("pairs.jsonl"), ctx.out("split.json")]


def cmd_train_encoder(ctx: Context, args) -> list[Path]:
    enc, log = ctx.ex.train_encoder(args.mode)
    ckpt = ctx.out(f"encoder_{args.mode}.json")
    save_encoder(enc, ckpt, {"mode": args.mode})
    rows = ((r.step, r.loss, r.probe_recall_at_1, r.wall_ms if ctx.run.record_wall_time else None)
            for r in log)
    csv_path = write_csv(ctx.out(f"train_{args.mode}.csv"),
                         ("step", "loss", "probe_recall@1", "wall_ms"), rows)
    return [ckpt, csv_path]


def cmd_sft_generator(ctx: Context, args) -> list[Path]:
    policy, losses = ctx.ex.train_sft()
    ckpt = ctx.out("policy_sft.json")
    attrgen.save_policy(policy, ckpt)
    csv_path = write_csv(ctx.out("sft.csv"), ("step", "loss"), enumerate(losses))
    return [ckpt, csv_path]


def cmd_rl_generator(ctx: Context, args) -> list[Path]:
    policy, log = ctx.ex.train_rl(ctx.policy("sft"), ctx.encoder("agcl"))
    ckpt = ctx.out("policy_rl.json")
    attrgen.save_policy(policy, ckpt)
    header = ("step", "mean_reward", "frac_valid", "mean_answer_len", "mean_think_len", "mean_kl",
              "clip_frac")
    rows = ((r.step, r.mean_reward, r.frac_valid, r.mean_answer_len, r.mean_think_len, r.mean_kl,
             r.clip_frac) for r in log)
    return [ckpt, write_csv(ctx.out("rl.csv"), header, rows)]


def eval_rows(ex: Experiment, which: str, encoder, policy, seed: int) -> list[tuple]:
    if which == "fine":
        return [("fine", r.metric, r.k, r.value, r.n_queries, seed)
                for r in ex.evaluate_fine(encoder, policy)]
    if which == "coarse":
        return [("coarse", r.metric, r.k, r.value, r.n_queries, seed)
                for r in ex.evaluate_coarse(encoder, policy)]
    if which == "cross_modal":
        return [(task, r.metric, r.k, r.value, r.n_queries, seed)
                for task, res in ex.evaluate_cross_modal(encoder, policy).items() for r in res]
    if which == "downstream":
        n = len(ex.split["test"])
        return [("downstream", m, None, v, n, seed)
                for m, v in ex.evaluate_downstream(encoder, policy).items()]
    raise ConfigError(f"unknown evaluation {which!r}")


def cmd_evaluate(ctx: Context, args) -> list[Path]:
    rows = eval_rows(ctx.ex, args.which, ctx.encoder(args.encoder), ctx.policy(args.policy),
                     ctx.cfg.seed)
    return [write_csv(ctx.out(f"eval_{args.which}_{args.encoder}_{args.policy}.csv"), EVAL_HEADER, rows)]


def cmd_cit(ctx: Context, args) -> list[Path]:
    ex = ctx.ex
    policy = ctx.policy("rl")
    before = ex.evaluate_downstream(ctx.encoder("agcl"), policy)
    res = ex.cit(policy)
    after = ex.evaluate_downstream(res.encoder, policy)
    ckpt = ctx.out("encoder_cit.json")
    save_encoder(res.encoder, ckpt, {"mode": "agcl", "cit_fraction": ex.config.cit.fraction})
    n = len(ex.split["test"])
    rows = [("cit_pre", m, None, v, n, ctx.cfg.seed) for m, v in before.items()]
    rows += [("cit_post", m, None, v, n, ctx.cfg.seed) for m, v in after.items()]
    rows += [("cit_coverage", "covered_pairs", None, float(res.covered_pairs), len(ex.pairs), ctx.cfg.seed),
             ("cit_coverage", "valid_fraction", None, res.valid_fraction, res.covered_pairs, ctx.cfg.seed)]
    log_rows = ((r.step, r.loss, r.probe_recall_at_1, r.wall_ms if ctx.run.record_wall_time else None)
                for r in res.train_log)
    return [ckpt, write_csv(ctx.out("cit.csv"), EVAL_HEADER, rows),
            write_csv(ctx.out("train_cit.csv"), ("step", "loss", "probe_recall@1", "wall_ms"), log_rows)]


def cmd_sweep_reward_k(ctx: Context, args) -> list[Path]:
    rows, summary = ctx.ex.reward_sweep(ctx.policy(args.policy), ctx.encoder("agcl"))
    hist = write_csv(ctx.out("reward_k_hist.csv"),
                     ("reward_kind", "k", "statistic", "bin_lo", "bin_hi", "count"),
                     ((r["reward_kind"], r["k"], r["statistic"], r["bin_lo"], r["bin_hi"], r["count"])
                      for r in rows))
    summ = write_csv(ctx.out("reward_k_summary.csv"),
                     ("reward_kind", "k", "mean_reward", "mean_group_std", "frac_valid_raw_one"),
                     ((kind, k, s["mean_reward"], s["mean_group_std"], s["frac_valid_raw_one"])
                      for kind, per_k in summary.items() for k, s in per_k.items()))
    return [hist, summ]


ABLATION_ROWS = (
    ("baseline", "infonce", "none"),
    ("+AGCL", "agcl", "none"),
    ("+AGCL+SFT-gen", "agcl", "sft"),
    ("full", "agcl", "rl"),
)


def cmd_ablation(ctx: Context, args) -> list[Path]:
    """Recall/NDCG ladder; checkpoints are loaded when present, trained in memory otherwise."""
    ex = ctx.ex
    encoders, policies = {}, {"none": None}

    def encoder(mode):
        if mode not in encoders:
            p = ctx.out(f"encoder_{mode}.json")
            encoders[mode] = load_encoder(p) if p.exists() else ex.train_encoder(mode, probe=False)[0]
        return encoders[mode]

    def policy(name):
        if name not in policies:
            p = ctx.out(f"policy_{name}.json")
            if p.exists():
                policies[name] = attrgen.load_policy(p)
            elif name == "sft":
                policies[name] = ex.train_sft()[0]
            else:
                policies[name] = ex.train_rl(policy("sft"), encoder("agcl"))[0]
        return policies[name]

    ks = ex.config.eval.ks
    header = ["order", "configuration", "encoder", "attributes"]
    header += [f"{m}@{k}" for m in ("recall", "ndcg") for k in ks] + ["n_queries", "seed"]
    rows = []
    for order, (name, mode, pol) in enumerate(ABLATION_ROWS):
        res = {(r.metric, r.k): r for r in ex.evaluate_fine(encoder(mode), policy(pol))}
        n = next(iter(res.values())).n_queries
        rows.append([order, name, mode, pol] + [res[(m, k)].value for m in ("recall", "ndcg") for k in ks]
                    + [n, ctx.cfg.seed])
    return [write_csv(ctx.out("ablation.csv"), header, rows)]


def stage_name(args) -> str:
    if args.command == "train-encoder":
        return f"train-encoder:{args.mode}"
    if args.command == "evaluate":
        return f"evaluate:{args.which}:{args.encoder}:{args.policy}"
    if args.command == "sweep-reward-k":
        return f"sweep-reward-k:{args.policy}"
    return args.command


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-encoder": cmd_train_encoder,
    "sft-generator": cmd_sft_generator,
    "rl-generator": cmd_rl_generator,
    "evaluate": cmd_evaluate,
    "cit": cmd_cit,
    "sweep-reward-k": cmd_sweep_reward_k,
    "ablation": cmd_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afmrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path, help="section.key = value config file")
        p.add_argument("--force", action="store_true", help="overwrite outputs of a finished stage")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        return p

    add("gen-corpus", "generate the synthetic universe and training pairs")
    add("train-encoder", "contrastive encoder training").add_argument(
        "--mode", choices=("infonce", "agcl"), default="agcl")
    add("sft-generator", "distil the oracle into the attribute generator")
    add("rl-generator", "GRPO fine-tuning of the generator against the frozen encoder")
    p = add("evaluate", "retrieval / downstream evaluation report")
    p.add_argument("--which", choices=("fine", "coarse", "cross_modal", "downstream"), required=True)
    p.add_argument("--encoder", choices=("infonce", "agcl", "cit"), default="agcl")
    p.add_argument("--policy", choices=("none", "sft", "rl"), default="none",
                   help="generator whose attributes enrich the queries")
    add("cit", "retrain the encoder with generator attributes on a fraction of pairs")
    add("sweep-reward-k", "reward histograms over k and reward kinds").add_argument(
        "--policy", choices=("sft", "rl"), default="sft")
    add("ablation", "four-row fine-retrieval ladder")
    return parser


@contextmanager
def thread_limit():
    n = os.environ.get("AFMRL_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def run_command(args) -> list[Path]:
    cfg_path = args.config
    try:
        text = cfg_path.read_text()
    except OSError as e:
        raise CliError(f"cannot read config: {e}") from None
    cfg, run = build_config(text, args.seed)
    out = Path(run.out_dir)
    if not out.is_absolute():
        out = (cfg_path.parent / out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    rundir = RunDir(out)
    stage = stage_name(args)
    with rundir.lock():
        rundir.ensure_manifest(config_snapshot(cfg, run), render_config(cfg, run))
        if rundir.stage_done(stage) and not args.force:
            raise AlreadyExists(f"{stage}: output already exists in {out} (use --force to overwrite)")
        rundir.record(stage, "started")
        try:
            with thread_limit():
                outputs = COMMANDS[args.command](Context(cfg, run, rundir), args)
        except Exception as e:
            rundir.record(stage, "failed", message=f"{type(e).__name__}: {e}")
            raise
        rundir.record(stage, "done", outputs)
    return outputs


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        outputs = run_command(args)
    except CliError as e:
        print(f"afmrl: error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"afmrl: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        print(f"afmrl: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    for p in outputs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
