"""Command-line pipeline: gen, preprocess, train, verify, compare-sampling.

Errors print one line ``error <CODE>: <message>`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import encoding as enc_mod
from . import lwe, preprocess, recovery
from .lwe import ParameterError

log = logging.getLogger("picante")

EXIT_CODES = {"PARAM": 2, "EXISTS": 3, "MISSING": 4, "PARSE": 5, "DIVERGED": 6, "INTERNAL": 70}
HOLDOUT = 10_000


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- configuration --------------------------------------------------------

DEFAULTS = {
    "lwe": {"n": "80", "q": "113", "h": "9", "sigma": "3.0"},
    "reduction": {"omega": "15", "beta": "20", "delta": "0.99"},
    "model": {},
    "train": {"epoch_size": "100000"},
    "recovery": {"n_a": "128"},
    "run": {"seed": "0", "workers": "1", "target_pairs": "50000", "max_epochs": "10"},
    "paths": {},
}

FLAG_KEYS = {  # CLI flag -> (section, key)
    "seed": ("run", "seed"), "workers": ("run", "workers"),
    "target_pairs": ("run", "target_pairs"), "epoch_size": ("train", "epoch_size"),
    "max_epochs": ("run", "max_epochs"), "h_range": ("recovery", "h_range"),
}


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).exists():
            raise CliError("MISSING", f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise CliError("PARSE", f"config {path}: {exc}".replace("\n", " ")) from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise CliError("PARSE", f"override {item!r} is not section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, value)
    return cp


def _typed(cls, section: dict, **fixed):
    kwargs = dict(fixed)
    for f in fields(cls):
        if f.name in section and f.name not in fixed:
            raw = section[f.name]
            kind = str(f.type)
            if raw.lower() in ("none", ""):
                kwargs[f.name] = None
            elif "tuple" in kind:
                kwargs[f.name] = tuple(float(x) for x in raw.split(","))
            elif "int" in kind and "float" not in kind:
                kwargs[f.name] = int(raw)
            elif "float" in kind:
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
    return cls(**kwargs)


def parse_h_range(text: str, n: int) -> list[int]:
    try:
        if "-" in text:
            lo, hi = (int(x) for x in text.split("-"))
            values = list(range(lo, hi + 1))
        else:
            values = [int(x) for x in text.split(",")]
    except ValueError:
        raise CliError("PARSE", f"bad h range {text!r}") from None
    if not values or min(values) < 1 or max(values) > n:
        raise CliError("PARAM", f"h range {text!r} must lie within [1, {n}]")
    return values


class Context:
    def __init__(self, args):
        self.args = args
        overrides = list(args.set or [])
        for flag, (section, key) in FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value is not None:
                overrides.append(f"{section}.{key}={value}")
        self.cp = load_config(args.config, overrides)
        root = args.data_dir or os.environ.get("PICANTE_DATA_DIR") or "."
        self.root = Path(root)
        paths = self.cp["paths"]
        self.instance = Path(args.instance or paths.get("instance", self.root / "instance.txt"))
        self.shard_dir = Path(args.shard_dir or paths.get("shard_dir", self.root / "shards"))
        self.checkpoint_dir = Path(paths.get("checkpoint_dir", self.root / "checkpoints"))
        self.report_dir = Path(paths.get("report_dir", self.root / "reports"))
        used = [self.instance, self.shard_dir, self.checkpoint_dir, self.report_dir]
        if len({p.resolve() for p in used}) != len(used):
            raise CliError("PARAM", "instance, shard, checkpoint and report paths must differ")

    def get(self, section, key, cast=str):
        try:
            return cast(self.cp[section][key])
        except (KeyError, ValueError) as exc:
            raise CliError("PARAM", f"[{section}] {key}: {exc}") from None

    def params(self) -> lwe.LweParams:
        s = self.cp["lwe"]
        m = int(s["m"]) if s.get("m") else None
        h = int(s["h"]) if s.get("h") not in (None, "", "0") else None
        return lwe.LweParams(int(s["n"]), int(s["q"]), h, float(s["sigma"]), m)

    def reduction(self) -> preprocess.ReductionConfig:
        return _typed(preprocess.ReductionConfig, self.cp["reduction"])

    def read_instance(self) -> lwe.LweInstanceSet:
        if not self.instance.exists():
            raise CliError("MISSING", f"instance file {self.instance} not found")
        return lwe.read_instance(self.instance)  # never the sidecar


# -- subcommands ----------------------------------------------------------

def cmd_gen(ctx: Context) -> int:
    params = ctx.params()
    if params.h is None:
        raise CliError("PARAM", "gen needs [lwe] h")
    seed = ctx.get("run", "seed", int)
    targets = [ctx.instance]
    if not ctx.args.no_secret:
        targets.append(lwe.secret_path(ctx.instance))
    if ctx.args.oracle_secret:
        targets.append(Path(ctx.args.oracle_secret))
    for path in targets:
        if path.exists() and not ctx.args.force:
            raise CliError("EXISTS", f"{path} exists (use --force)")
    ctx.instance.parent.mkdir(parents=True, exist_ok=True)
    inst = lwe.gen_instance(params, seed)
    lwe.write_instance(ctx.instance, inst, with_secret=not ctx.args.no_secret)
    if ctx.args.no_secret:
        stale = lwe.secret_path(ctx.instance)
        if stale.exists():
            stale.unlink()
    if ctx.args.oracle_secret:
        # escrow for the cheating test oracle; the attack itself never opens it
        lwe.write_secret(ctx.args.oracle_secret, inst.secret)
    print(f"wrote {ctx.instance} n={params.n} q={params.q} m={params.m} seed={seed}"
          f" secret={'omitted' if ctx.args.no_secret else 'sidecar'}")
    return 0


def _stats_line(stats: preprocess.DatasetStats, matrices: int) -> str:
    return (f"std_ratio={stats.std_ratio:.4f} norm_ratio={stats.norm_ratio:.4f} "
            f"duplicates={stats.duplicate_count} zero_row_fraction={stats.zero_row_fraction:.4f} "
            f"pairs={stats.n_pairs} matrices={matrices}")


def _progress(info):
    log.info("matrix %d: %d pairs, %.1fs, %d tours%s", info["index"], info["pairs"],
             info["seconds"], info["tours"], " (timeout)" if info["timed_out"] else "")


def cmd_preprocess(ctx: Context) -> int:
    inst = ctx.read_instance()
    ds = preprocess.preprocess_campaign(
        inst, ctx.reduction(), ctx.get("run", "target_pairs", int),
        workers=ctx.get("run", "workers", int), shard_dir=ctx.shard_dir, progress=_progress)
    line = _stats_line(ds.stats, ds.meta["matrices"])
    preprocess.write_atomic(ctx.shard_dir / "stats.txt", line + "\n")
    print(line)
    return 0


def _cheat_oracle(ctx: Context, inst, encoding):
    from .model import CheatOracle
    path = ctx.args.oracle_secret
    if not path:
        raise CliError("PARAM", "--model=cheat needs --oracle-secret")
    if Path(path).resolve() == lwe.secret_path(ctx.instance).resolve():
        raise CliError("PARAM", "the cheat oracle may not read the instance sidecar")
    if not Path(path).exists():
        raise CliError("MISSING", f"oracle secret {path} not found")
    return CheatOracle(lwe.read_secret(path, inst.params.n), inst.params.q, encoding)


def cmd_train(ctx: Context) -> int:
    import torch
    from .model import (ModelConfig, Seq2Seq, TrainConfig, Trainer, TrainingDivergedError,
                        TransformerOracle, evaluate, load_checkpoint, save_checkpoint)

    inst = ctx.read_instance()
    p = inst.params
    max_epochs = ctx.get("run", "max_epochs", int)
    if max_epochs < 1:
        raise CliError("PARAM", "max_epochs must be >= 1")
    seed = ctx.get("run", "seed", int)
    h_text = ctx.cp["recovery"].get("h_range") or (f"{p.h}" if p.h else f"1-{max(1, p.n // 4)}")
    h_range = parse_h_range(h_text, p.n)
    n_a = ctx.get("recovery", "n_a", int)

    ds = preprocess.load_dataset(ctx.shard_dir, p)
    order = np.random.default_rng(seed).permutation(len(ds))
    n_hold = min(HOLDOUT, len(ds) // 10) if len(ds) >= 20 else 0
    hold, train = order[:n_hold], order[n_hold:]
    cross_a = ds.a[hold] if n_hold else ds.a[: min(len(ds), HOLDOUT)]

    cp = ctx.cp
    encoding = enc_mod.derive_encoding(p.n, p.q)
    if cp.has_section("encoding") and len(cp["encoding"]):
        e = cp["encoding"]
        encoding = enc_mod.EncodingConfig.custom(p.q, int(e.get("base_B", encoding.base_B)),
                                                 int(e.get("bucket_r", encoding.bucket_r)))
    ctx.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    ctx.report_dir.mkdir(parents=True, exist_ok=True)
    enc_mod.write_manifest(ctx.checkpoint_dir / "vocab.txt", encoding)

    state_path = ctx.checkpoint_dir / "state.json"
    state = json.loads(state_path.read_text()) if state_path.exists() else \
        {"epoch": 0, "last_checkpoint": None, "success": None}
    if state["success"]:
        print(f"already succeeded: {json.dumps(state['success'])}")
        return 0

    kind = ctx.args.model
    trainer = None
    if kind == "cheat":
        oracle = _cheat_oracle(ctx, inst, encoding)
    else:
        torch.manual_seed(seed)
        mcfg = _typed(ModelConfig, cp["model"], vocab_size=encoding.vocab_size,
                      max_input_len=2 * p.n, seed=seed)
        model = Seq2Seq(mcfg)
        if state["last_checkpoint"]:
            model, _ = load_checkpoint(ctx.checkpoint_dir / state["last_checkpoint"], encoding)
        trainer = Trainer(model, encoding, _typed(TrainConfig, cp["train"], seed=seed))
        trainer.epoch = state["epoch"]
        oracle = TransformerOracle(model, encoding)

    report_secret = None
    if ctx.args.report_secret:
        report_secret = lwe.read_secret(ctx.args.report_secret, p.n)

    metrics_path = ctx.report_dir / "metrics.csv"
    new_file = not metrics_path.exists()
    rng = np.random.default_rng([seed, 1])
    with metrics_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", "examples", "loss", "token_accuracy", "eval_accuracy",
                             "success", "method", "h"])
        for epoch in range(state["epoch"] + 1, max_epochs + 1):
            examples, loss, acc = 0, float("nan"), float("nan")
            if trainer is not None:
                try:
                    m = trainer.train_epoch(ds.a[train], ds.b[train])
                except TrainingDivergedError as exc:
                    raise CliError("DIVERGED", str(exc)) from None
                examples, loss, acc = m.examples, m.mean_loss, m.token_accuracy
                name = f"epoch{epoch:04d}.ckpt"
                save_checkpoint(ctx.checkpoint_dir / name, trainer.model, encoding,
                                {"epoch": epoch, "step": trainer.step})
                state["last_checkpoint"] = name
            eval_acc = evaluate(oracle, ds.a[hold], ds.b[hold]) if n_hold else float("nan")
            report = recovery.recover_all(oracle, inst, h_range, reduced_a=cross_a, rng=rng,
                                          n_a=n_a, epoch=epoch, report_secret=report_secret)
            report.metadata["model"] = kind
            recovery.write_report(report, ctx.report_dir)
            won = report.success
            writer.writerow([epoch, examples, loss, acc, eval_acc, int(won is not None),
                             won.guess.provenance if won else "", won.guess.h_used if won else ""])
            fh.flush()
            state["epoch"] = epoch
            if won is not None:
                state["success"] = {"epoch": epoch, "method": won.guess.provenance,
                                    "h": won.guess.h_used,
                                    "secret": "".join(map(str, won.guess.bits.tolist()))}
            preprocess.write_atomic(state_path, json.dumps(state, indent=1))
            print(f"epoch={epoch} loss={loss:.4f} token_accuracy={acc:.4f} "
                  f"eval_accuracy={eval_acc:.4f} success={str(won is not None).lower()}"
                  + (f" method={won.guess.provenance} h={won.guess.h_used}" if won else ""))
            if won is not None:
                guess_file = ctx.report_dir / "recovered_secret.txt"
                lwe.write_secret(guess_file, won.guess.bits)
                print(f"verified secret written to {guess_file}")
                return 0
    print("no verified secret within max_epochs")
    return 0


def cmd_verify(ctx: Context) -> int:
    inst = ctx.read_instance()
    try:
        guess = lwe.read_secret(ctx.args.guess, inst.params.n)
    except (ParameterError, OSError) as exc:
        raise CliError("PARSE", str(exc)) from None
    res = lwe.verify_guess_detailed(inst, guess)
    print(f"std_emp={res.stats.std_emp:.4f}")
    print(f"right_interval=[{res.right_interval[0]:.2f}, {res.right_interval[1]:.2f}]")
    print(f"wrong_interval=[{res.wrong_interval[0]:.2f}, {res.wrong_interval[1]:.2f}]")
    print(f"verdict={res.verdict.value}")
    return 0


def cmd_compare_sampling(ctx: Context) -> int:
    # the independent-sample reference needs the generating secret by construction
    inst = lwe.read_instance(ctx.instance, load_secret=True) if ctx.instance.exists() else None
    if inst is None:
        raise CliError("MISSING", f"instance file {ctx.instance} not found")
    if not lwe.secret_path(ctx.instance).exists():
        raise CliError("MISSING", "compare-sampling needs the secret sidecar")
    cfg = ctx.reduction()
    target = ctx.get("run", "target_pairs", int)
    workers = ctx.get("run", "workers", int)
    rows = {}
    for mode in ("subsample", "independent"):
        ds = preprocess.preprocess_campaign(inst, cfg, target, workers=workers,
                                            shard_dir=ctx.shard_dir / mode, sampling=mode,
                                            progress=_progress)
        rows[mode] = (ds.stats, ds.meta["matrices"])
    lines = [f"{mode}: {_stats_line(*row)}" for mode, row in rows.items()]
    diff = rows["subsample"][0].std_ratio - rows["independent"][0].std_ratio
    lines.append(f"std_ratio_difference={diff:+.4f}")
    report = "\n".join(lines) + "\n"
    ctx.shard_dir.mkdir(parents=True, exist_ok=True)
    preprocess.write_atomic(ctx.shard_dir / "compare_sampling.txt", report)
    print(report, end="")
    return 0


COMMANDS = {"gen": cmd_gen, "preprocess": cmd_preprocess, "train": cmd_train,
            "verify": cmd_verify, "compare-sampling": cmd_compare_sampling}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--data-dir", help="path root (default: $PICANTE_DATA_DIR or .)")
    common.add_argument("--instance")
    common.add_argument("--shard-dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="picante", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common])
    g.add_argument("--no-secret", action="store_true", help="do not write the secret sidecar")
    g.add_argument("--oracle-secret", help="escrow file for --model=cheat test runs")
    g.add_argument("--force", action="store_true")
    p = sub.add_parser("preprocess", parents=[common])
    p.add_argument("--target-pairs", type=int)
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--epoch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--model", choices=("transformer", "cheat"), default="transformer")
    t.add_argument("--h-range")
    t.add_argument("--oracle-secret", help="secret file read only by --model=cheat")
    t.add_argument("--report-secret", help="known secret, used only for rank reporting")
    v = sub.add_parser("verify", parents=[common])
    v.add_argument("guess")
    c = sub.add_parser("compare-sampling", parents=[common])
    c.add_argument("--target-pairs", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](Context(args))
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ParameterError as exc:
        code, msg = "PARAM", str(exc)
    except FileNotFoundError as exc:
        code, msg = "MISSING", str(exc)
    except preprocess.InternalConsistencyError as exc:
        code, msg = "INTERNAL", str(exc)
    print(f"error {code}: {' '.join(msg.split())}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
