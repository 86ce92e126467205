"""Command-line entry point: ``tiltmatch {verify,pretrain,finetune,eval,info}``.

Exit codes: 0 success, 1 failed verification or runtime error, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .core import Schedule, make_rng
from .maze import (Maze, decode_body, evaluate_rollouts, generate_maze, path_corpus, pretrain_base,
                   prompt_tokens, render_svg, reward_stay_away, sample_prompts)
from .model import Adam, NeuralConfig, NeuralModel, load_checkpoint, save_checkpoint
from .objective import DtmConfig
from .trainer import BufferConfig, DivergenceError, RolloutConfig, run_dtm, sar_rollout
from .verify import SUITES, run_suites

log = logging.getLogger("tiltmatch")

# independent random streams, keyed by purpose under the run seed
STREAM_CORPUS, STREAM_INIT, STREAM_TRAIN, STREAM_EVAL, STREAM_FINETUNE = range(1, 6)

PHASE_COLUMNS = ["phase_index", "a", "step", "loss", "mean_buffer_reward", "grad_norm"]
METRIC_COLUMNS = ["prompt_id", "n", "valid_frac", "mean_reward", "coverage_ratio"]


class RunLocked(RuntimeError):
    pass


def build_id() -> str:
    """Hash of the package sources, stable across reruns of the same code."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def provenance(cfg: cfgmod.RunConfig, verb: str) -> str:
    return (f"# tiltmatch {__version__} build={build_id()} config={cfg.digest()} "
            f"seed={cfg.seed} verb={verb}")


def write_csv(path: Path, columns, rows, header: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(o):
    return o.tolist() if hasattr(o, "tolist") else float(o)


@contextlib.contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # recorded in the config either way
        return contextlib.nullcontext()
    return threadpool_limits(n)


class MazeEnv:
    """The fixed maze and evaluation prompt pool implied by a config."""

    def __init__(self, cfg: cfgmod.RunConfig):
        m = cfg.maze
        rng = make_rng(m.seed)
        self.maze: Maze = generate_maze(m.width, m.door_fraction, rng, seed=m.seed)
        self.prompts = sample_prompts(self.maze, m.n_prompts, rng, m.body_length)
        self.prompt_ids = np.arange(len(self.prompts))
        self.prompt_tok = prompt_tokens(self.maze, self.prompts)
        self.body_length = m.body_length
        self.length = 3 + m.body_length

    def reward(self, seq) -> float:
        return reward_stay_away(self.maze, seq)

    def rollouts(self, model, per_prompt: int, rollout: RolloutConfig, rng):
        ids = np.repeat(self.prompt_ids, per_prompt)
        x, _ = sar_rollout(model, len(ids), rollout, rng, self.prompt_tok[ids])
        return x, ids

    def evaluate(self, model, per_prompt: int, rollout: RolloutConfig, rng):
        x, ids = self.rollouts(model, per_prompt, rollout, rng)
        return evaluate_rollouts(self.maze, x, ids), x, ids


def rollout_config(cfg: cfgmod.RunConfig, temperature=None) -> RolloutConfig:
    r = cfg.rollout
    return RolloutConfig(r.steps, r.block, r.order,
                         r.temperature if temperature is None else temperature)


def _summary(metrics: dict) -> dict:
    return {k: metrics[k] for k in ("valid_frac", "mean_reward", "coverage_ratio")}


def _write_resolved(cfg: cfgmod.RunConfig, out: Path) -> None:
    (out / "config.json").write_text(cfg.to_json())


def cmd_verify(cfg, args) -> int:
    out = Path(args.out)
    with run_lock(out):
        _write_resolved(cfg, out)
        checks = run_suites(args.suite, seed=cfg.seed)
        lines = [c.line() for c in checks]
        (out / "verify_report.txt").write_text(
            provenance(cfg, "verify") + "\n" + "\n".join(lines) + "\n")
    for line in lines:
        print(line)
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def cmd_pretrain(cfg, args) -> int:
    out = Path(args.out)
    env = MazeEnv(cfg)
    p = cfg.pretrain
    rollout = rollout_config(cfg)
    with run_lock(out):
        _write_resolved(cfg, out)
        (out / "maze.txt").write_text(env.maze.to_text())
        corpus = path_corpus(env.maze, p.n_paths, make_rng([cfg.seed, STREAM_CORPUS]),
                             env.body_length, env.prompts)
        state_path = out / "pretrain_state.npz"
        history, start = [], 0
        rng = make_rng([cfg.seed, STREAM_TRAIN])
        opt = Adam(lr=p.lr, betas=tuple(cfg.optimizer.betas), weight_decay=0.0,
                   clip=cfg.optimizer.clip)
        if args.resume and state_path.exists():
            model = load_checkpoint(out / "base.ckpt")
            st = np.load(state_path)
            opt.m, opt.v, opt.t = st["m"], st["v"], int(st["t"])
            rng.bit_generator.state = json.loads(str(st["rng"]))
            history = json.loads(str(st["history"]))
            start = len(history)
            log.info("resuming pretraining at epoch %d", start)
        else:
            mc = cfg.model
            model = NeuralModel(env.maze.vocab_size, env.length,
                                NeuralConfig(mc.embed_dim, mc.hidden_dim, mc.window, mc.init_scale),
                                seed=make_rng([cfg.seed, STREAM_INIT]))

        def eval_fn(m, epoch):
            res, _, _ = env.evaluate(m, p.eval_rollouts_per_prompt, rollout,
                                     make_rng([cfg.seed, STREAM_EVAL]))
            return _summary(res)

        def on_epoch(m, rec, optimizer):
            history.append(rec)
            save_checkpoint(m, out / "base.ckpt")
            np.savez(state_path, m=optimizer.m, v=optimizer.v, t=optimizer.t,
                     rng=json.dumps(rng.bit_generator.state), history=json.dumps(history))
            write_csv(out / "pretrain_metrics.csv",
                      ["epoch", "loss", "valid_frac", "mean_reward", "coverage_ratio"],
                      history, provenance(cfg, "pretrain"))
            log.info("epoch %d loss %.4f valid %.3f reward %.3f", rec["epoch"], rec["loss"],
                     rec["valid_frac"], rec["mean_reward"])

        remaining = p.epochs - start
        if remaining > 0:
            pretrain_base(env.maze, None, p.n_paths, rng, env.body_length, epochs=remaining,
                          batch_size=p.batch_size, lr=p.lr, eval_fn=eval_fn, model=model,
                          start_epoch=start, on_epoch=on_epoch, corpus=corpus, optimizer=opt)
    if history:
        print(json.dumps(history[-1]))
    return 0


def _load_base(path, env: MazeEnv):
    model = load_checkpoint(path)
    if model.vocab_size != env.maze.vocab_size or model.length != env.length:
        raise cfgmod.ConfigError(
            f"checkpoint {path} (V={model.vocab_size}, L={model.length}) does not match the "
            f"configured maze (V={env.maze.vocab_size}, L={env.length})")
    return model


def matched_steps(cfg: cfgmod.RunConfig) -> tuple[int, int]:
    """(phases, steps per phase) with phases * steps held at the configured total."""
    n_phases = math.ceil(cfg.dtm.A / cfg.dtm.h - 1e-12)
    if n_phases == 0:
        return 0, 0
    return n_phases, max(1, cfg.finetune.total_steps // n_phases)


def cmd_finetune(cfg, args) -> int:
    out = Path(args.out)
    env = MazeEnv(cfg)
    base = _load_base(args.base, env)
    d, b, o = cfg.dtm, cfg.buffer, cfg.optimizer
    n_phases, spp = matched_steps(cfg)
    rollout = rollout_config(cfg)
    header = provenance(cfg, "finetune")
    eval_n = cfg.finetune.eval_rollouts_per_prompt
    with run_lock(out):
        _write_resolved(cfg, out)
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        base_eval, _, _ = env.evaluate(base, eval_n, rollout, make_rng([cfg.seed, STREAM_EVAL]))
        evals = [{"phase_index": -1, "a": 0.0, **_summary(base_eval)}]
        rows = []

        def on_phase_end(k, a_next, theta, phase):
            save_checkpoint(theta, ckdir / f"phase_{k:03d}.ckpt")
            res, _, _ = env.evaluate(theta, eval_n, rollout, make_rng([cfg.seed, STREAM_EVAL]))
            evals.append({"phase_index": k, "a": a_next, **_summary(res)})
            rows.extend(phase.records)
            log.info("phase %d a=%.2f valid %.3f reward %.3f coverage %.3f", k, a_next,
                     res["valid_frac"], res["mean_reward"], res["coverage_ratio"])

        t0 = time.time()
        try:
            theta, _ = run_dtm(
                base, env.reward, d.A, d.h, spp, BufferConfig(b.size, b.refresh_interval, b.refresh_fraction),
                DtmConfig(c=d.c, h=d.h, batch_size=d.batch_size, s_cap=d.s_cap,
                          reward_clip=d.reward_clip, objective=d.objective),
                rollout, make_rng([cfg.seed, STREAM_FINETUNE]),
                optimizer_factory=lambda: Adam(o.lr, tuple(o.betas), weight_decay=o.weight_decay,
                                               clip=o.clip),
                prompt_sampler=lambda n, rng: env.prompt_tok[rng.integers(0, len(env.prompts), n)],
                schedule=Schedule(cfg.schedule.kind, cfg.schedule.exponent),
                on_phase_end=on_phase_end)
        except DivergenceError as e:
            (out / "divergence.json").write_text(json.dumps(e.dump, indent=2, default=_jsonable))
            print(f"error: {e}", file=sys.stderr)
            return 1
        finally:
            write_csv(out / "phase_logs.csv", PHASE_COLUMNS, rows, header)
            write_csv(out / "phase_eval.csv", ["phase_index", "a", "valid_frac", "mean_reward",
                                               "coverage_ratio"], evals, header)
        save_checkpoint(theta, out / "final.ckpt")
        summary = {"c": d.c, "h": d.h, "A": d.A, "phases": n_phases, "steps_per_phase": spp,
                   "base": evals[0], "final": evals[-1]}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("fine-tuning took %.1f s", time.time() - t0)
    print(json.dumps(summary["final"]))
    return 0


def cmd_eval(cfg, args) -> int:
    out = Path(args.out)
    env = MazeEnv(cfg)
    model = _load_base(args.checkpoint, env)
    e = cfg.eval
    n = args.n if args.n is not None else e.rollouts_per_prompt
    temperature = args.temperature if args.temperature is not None else e.temperature
    header = provenance(cfg, "eval")
    with run_lock(out):
        _write_resolved(cfg, out)
        res, x, ids = env.evaluate(model, n, rollout_config(cfg, temperature),
                                   make_rng([cfg.seed, STREAM_EVAL]))
        overall = {"prompt_id": "all", "n": len(x), **_summary(res)}
        write_csv(out / "eval_metrics.csv", METRIC_COLUMNS, res["per_prompt"] + [overall], header)
        dump = [{"prompt_id": int(p), "path_tokens": " ".join(map(str, seq[3:])),
                 "valid": int(ok), "reward": r}
                for p, seq, ok, r in zip(ids, x, res["valid"], res["rewards"])]
        write_csv(out / "rollouts.csv", ["prompt_id", "path_tokens", "valid", "reward"], dump,
                  header)
        if args.svg or e.svg:
            valid_paths = [decode_body(env.maze, s) for s, ok in zip(x, res["valid"]) if ok]
            (out / "rollouts.svg").write_text(render_svg(env.maze, valid_paths))
    print(json.dumps(overall))
    return 0


def cmd_info(cfg, args) -> int:
    print(f"tiltmatch {__version__} build={build_id()}")
    print(f"suites: {', '.join(SUITES)}")
    print(cfg.to_json(), end="")
    return 0


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs/default", help="run directory")
    common.add_argument("--threads", type=int, help="numeric thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tiltmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("verify", parents=[common], help="run invariant suites")
    p.add_argument("--suite", nargs="+", default=["all"], choices=[*SUITES, "all"])

    p = sub.add_parser("pretrain", parents=[common], help="pretrain the maze base model")
    p.add_argument("--resume", action="store_true", help="continue from the run directory")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", parents=[common], help="annealed DTM fine-tuning")
    p.add_argument("--base", required=True, help="base model checkpoint")
    p.add_argument("--c", type=float, help="control variate")
    p.add_argument("--h", type=float, help="annealing step")
    p.add_argument("--A", type=float, help="terminal tilt")
    p.add_argument("--total-steps", type=int, help="optimizer steps across all phases")

    p = sub.add_parser("eval", parents=[common], help="rollout metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, help="rollouts per prompt")
    p.add_argument("--temperature", type=float)
    p.add_argument("--svg", action="store_true", help="also render valid rollouts as SVG")

    sub.add_parser("info", parents=[common], help="print version and resolved config")
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    for attr, section, key in [("c", "dtm", "c"), ("h", "dtm", "h"), ("A", "dtm", "A"),
                               ("total_steps", "finetune", "total_steps"),
                               ("epochs", "pretrain", "epochs")]:
        value = getattr(args, attr, None)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    cfgmod.validate(cfg)
    return cfg


COMMANDS = {"verify": cmd_verify, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "info": cmd_info}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (cfgmod.ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        with thread_limit(cfg.threads):
            return COMMANDS[args.verb](cfg, args)
    except cfgmod.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (RunLocked, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
