"""Command line entry point: ``mastavn <verb> [flags]``.

Every verb reads one YAML config, writes its artifacts under the run
directory (``--out``, else ``output_dir``/``$MASTAVN_OUT``/run_id) and
exits nonzero on any error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import metrics as M
from .config import ConfigError, ExperimentConfig, parse_config, write_config
from .figures import TraceError, emit_attention_dump, emit_trajectory_plot, observation_batch
from .model import load_model
from .training import TrainingDiverged, train

log = logging.getLogger("mastavn")

BASELINES = ("random-two-agent", "random-one-agent", "independent-two-agent")


class CliError(RuntimeError):
    pass


def _run_dir(cfg: ExperimentConfig, out) -> Path:
    path = Path(out) if out else cfg.run_dir
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_report(path: Path, reports) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        M.write_report_csv(tmp, reports)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _splits(split: str) -> tuple[str, ...]:
    return ("heard", "unheard") if split == "both" else (split,)


def _require_checkpoint(path) -> Path:
    if path is None:
        raise CliError("--checkpoint is required")
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return path


def cmd_train(cfg: ExperimentConfig, out=None) -> Path:
    run = _run_dir(cfg, out)
    write_config(cfg, run / "config.yaml")
    res = train(cfg.train.build(), cfg.model.build(), cfg.env.build(), out_dir=run)
    log.info("trained %d updates into %s", len(res.metrics), run)
    return run / "final.json"


def _evaluate_policy(cfg, policy, n_agents, run, split, traces=False, name="eval"):
    env = cfg.env.build()
    scenes = env.scenes(cfg.eval.scenes)
    reports, records = [], []
    for s in _splits(split):
        rep, recs = M.evaluate(policy, scenes, s, cfg.eval.episodes_per_scene, cfg.eval.seed, n_agents,
                               env.max_steps, keep_traces=traces)
        reports.append(rep)
        records.extend(recs)
    _atomic_report(run / f"{name}.csv", reports)
    M.write_episodes(run / f"{name}_episodes.jsonl", records)
    if traces:
        with open(run / f"{name}_traces.jsonl", "w") as fh:
            for r in records:
                fh.write("\n".join(r.trace) + "\n")
    for rep in reports:
        log.info("%s %s: SR %.3f SPL %.3f SNA %.3f over %d episodes", rep.method, rep.split, rep.sr, rep.spl,
                 rep.sna, rep.episodes)
    return reports


def cmd_eval(cfg: ExperimentConfig, checkpoint, method=None, out=None, split=None, traces=False):
    ckpt = _require_checkpoint(checkpoint)
    params, mcfg, _ = load_model(ckpt)
    policy = M.ModelPolicy(params, mcfg, method or M.ablation_label(mcfg), cfg.eval.greedy)
    run = _run_dir(cfg, out)
    write_config(cfg, run / "config.yaml")
    return _evaluate_policy(cfg, policy, mcfg.n_agents, run, split or cfg.eval.split, traces)


def cmd_ablate(cfg: ExperimentConfig, kind: str, out=None, split=None):
    """Train the ablated variant ``kind`` with the config's budget, then evaluate it."""
    if kind not in M.ABLATIONS:
        raise CliError(f"unknown ablation {kind!r}; choose from {sorted(M.ABLATIONS)}")
    flag, value = M.ABLATIONS[kind]
    cfg = cfg.with_updates(model={flag: value})
    run = _run_dir(cfg, out)
    write_config(cfg, run / "config.yaml")
    train(cfg.train.build(), cfg.model.build(), cfg.env.build(), out_dir=run)
    params, mcfg, _ = load_model(run / "final.json")
    M.check_ablation(kind, mcfg)
    policy = M.ModelPolicy(params, mcfg, kind, cfg.eval.greedy)
    return _evaluate_policy(cfg, policy, mcfg.n_agents, run, split or cfg.eval.split)


def cmd_baseline(cfg: ExperimentConfig, kind: str, checkpoint=None, out=None, split=None):
    if kind not in BASELINES:
        raise CliError(f"unknown baseline {kind!r}; choose from {list(BASELINES)}")
    n_agents = 2
    if kind == "independent-two-agent":
        params, mcfg, _ = load_model(_require_checkpoint(checkpoint))
        policy = M.IndependentPolicy(params, mcfg, kind, cfg.eval.greedy)
    elif kind == "random-one-agent":
        policy, n_agents = M.RandomPolicy(kind), 1
    else:
        policy = M.RandomPolicy(kind)
    run = _run_dir(cfg, out)
    write_config(cfg, run / "config.yaml")
    return _evaluate_policy(cfg, policy, n_agents, run, split or cfg.eval.split, name=f"baseline_{kind}")


def cmd_plot_traj(trace, out, episode: int = 0) -> Path:
    if not Path(trace).is_file():
        raise CliError(f"trace not found: {trace}")
    return emit_trajectory_plot(trace, out, episode)


def cmd_dump_attn(checkpoint, out, cfg: ExperimentConfig | None = None, seed: int = 0, batch: int = 4) -> Path:
    ckpt = _require_checkpoint(checkpoint)
    params, mcfg, _ = load_model(ckpt)
    if cfg is not None:
        want = cfg.model.build()
        if want != mcfg:
            diff = {k: (v, mcfg.to_dict()[k]) for k, v in want.to_dict().items() if mcfg.to_dict()[k] != v}
            raise CliError(f"config/checkpoint mismatch (config, checkpoint): {diff}")
        env = cfg.env.build()
        scenes = env.scenes(cfg.eval.scenes)
    else:
        from .training import EnvSpec

        env = EnvSpec()
        scenes = env.scenes(env.probe_scenes)
    visual, audio = observation_batch(scenes, mcfg, batch, seed)
    return emit_attention_dump(params, mcfg, visual, audio, out)


def cmd_reproduce(cfg: ExperimentConfig, seeds, out=None) -> bool:
    from .experiments import run_ordering

    res = run_ordering(cfg, seeds, _run_dir(cfg, out))
    print(res.summary())
    ok = True
    for name, passed in res.checks().items():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return ok


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mastavn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="experiment YAML")
        p.add_argument("--seed", type=int, help="override train.seed (train/ablate) or eval.seed (eval/baseline)")
        p.add_argument("--out", help="run directory (default: <output root>/<run_id>)")
        return p

    with_config(sub.add_parser("train", help="train a model"))
    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--method", help="label for the report row (default: derived from the checkpoint)")
    p.add_argument("--split", choices=("heard", "unheard", "both"))
    p.add_argument("--traces", action="store_true", help="also write per-step JSON-lines traces")
    p = with_config(sub.add_parser("ablate", help="train and evaluate an ablated model"))
    p.add_argument("--method", required=True, choices=sorted(M.ABLATIONS))
    p.add_argument("--split", choices=("heard", "unheard", "both"))
    p = with_config(sub.add_parser("baseline", help="evaluate a baseline policy"))
    p.add_argument("--method", required=True, choices=BASELINES)
    p.add_argument("--checkpoint", help="single-agent checkpoint for independent-two-agent")
    p.add_argument("--split", choices=("heard", "unheard", "both"))
    p = sub.add_parser("plot-traj", help="render one episode of a trace file as SVG")
    p.add_argument("trace")
    p.add_argument("--out", required=True)
    p.add_argument("--episode", type=int, default=0)
    p = sub.add_parser("dump-attn", help="write attention weights of a checkpoint as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="check the checkpoint against this config and draw scenes from it")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=4)
    p = with_config(sub.add_parser("reproduce", help="multi-seed ordering experiment"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return ap


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        section = "eval" if args.verb in ("eval", "baseline") else "train"
        cfg = cfg.with_updates(**{section: {"seed": args.seed}})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.verb == "train":
            print(cmd_train(_load(args), args.out))
        elif args.verb == "eval":
            cfg = _load(args)
            _require_checkpoint(args.checkpoint)
            for r in cmd_eval(cfg, args.checkpoint, args.method, args.out, args.split, args.traces):
                print(r.row())
        elif args.verb == "ablate":
            for r in cmd_ablate(_load(args), args.method, args.out, args.split):
                print(r.row())
        elif args.verb == "baseline":
            for r in cmd_baseline(_load(args), args.method, args.checkpoint, args.out, args.split):
                print(r.row())
        elif args.verb == "plot-traj":
            print(cmd_plot_traj(args.trace, args.out, args.episode))
        elif args.verb == "dump-attn":
            cfg = parse_config(args.config) if args.config else None
            print(cmd_dump_attn(args.checkpoint, args.out, cfg, args.seed, args.batch))
        elif args.verb == "reproduce":
            cfg = _load(args)
            return 0 if cmd_reproduce(cfg, args.seeds, args.out) else 1
    except (CliError, ConfigError, TraceError, TrainingDiverged, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"mastavn {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
