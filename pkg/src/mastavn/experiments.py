"""Multi-seed comparison of the joint model against baselines and ablations
under one shared training budget."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import ConfigError, ExperimentConfig, parse_config, write_config
from .model import load_model
from .training import train

log = logging.getLogger(__name__)

# method -> model overrides for the trained variants
TRAINED = {
    "mast": {},
    "single": {"n_agents": 1},
    "wo-en": {"skip_encoders": True},
    "wo-de": {"mlp_decoder": True},
}
ORDER_FIELDS = ("seed", "method", "split", "SR", "SPL", "SNA", "episodes", "train_seconds")


@dataclass
class OrderingResult:
    rows: list[dict] = field(default_factory=list)

    def sr(self, method: str, split: str = "heard") -> list[float]:
        return [r["SR"] for r in self.rows if r["method"] == method and r["split"] == split]

    def mean_sr(self, method: str, split: str = "heard") -> float:
        return float(np.mean(self.sr(method, split)))

    def checks(self, gap_main: float = 0.10, gap_ablation: float = 0.05) -> dict[str, bool]:
        m = {k: self.mean_sr(k) for k in ("mast", "independent-two-agent", "random-two-agent", "wo-en", "wo-de")}
        heard = self.sr("mast", "heard")
        unheard = self.sr("mast", "unheard")
        # SR values are k/episodes; the slack keeps an exact gap from failing on rounding
        gap_main, gap_ablation = gap_main - 1e-9, gap_ablation - 1e-9
        return {
            "mast > independent": m["mast"] - m["independent-two-agent"] >= gap_main,
            "independent > random": m["independent-two-agent"] - m["random-two-agent"] >= gap_main,
            "full > wo-en": m["mast"] - m["wo-en"] >= gap_ablation,
            "wo-en > wo-de": m["wo-en"] - m["wo-de"] >= gap_ablation,
            "unheard <= heard": bool(unheard) and all(u <= h for u, h in zip(unheard, heard)),
        }

    def summary(self) -> str:
        lines = []
        for method in ("mast", "independent-two-agent", "random-two-agent", "wo-en", "wo-de"):
            srs = self.sr(method)
            lines.append(f"{method:>22s}  heard SR {np.mean(srs):.3f}  per seed {[round(s, 3) for s in srs]}")
        lines.append(f"{'mast unheard':>22s}  SR {[round(s, 3) for s in self.sr('mast', 'unheard')]}")
        return "\n".join(lines)


def _row(seed, report: M.MetricsReport, seconds=float("nan")) -> dict:
    return {"seed": seed, "method": report.method, "split": report.split, "SR": report.sr, "SPL": report.spl,
            "SNA": report.sna, "episodes": report.episodes, "train_seconds": seconds}


def _finished_seconds(run: ExperimentConfig, rdir: Path):
    """Training time of a completed run in ``rdir`` with the same config, else None."""
    try:
        if parse_config(rdir / "config.yaml") != run or not (rdir / "final.json").is_file():
            return None
        return float(json.loads((rdir / "train_seconds.json").read_text())["train_seconds"])
    except (ConfigError, OSError, ValueError, KeyError):
        return None


def run_ordering(cfg: ExperimentConfig, seeds=(0, 1, 2), out_dir=None, methods=tuple(TRAINED)) -> OrderingResult:
    """Train every variant in ``methods`` per seed, then evaluate all of them and
    the random baseline on ``cfg.eval`` scenes. Writes ``ordering.csv`` under the output
    directory. Runs already finished there with an identical config are not retrained."""
    out = Path(out_dir) if out_dir is not None else cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.yaml")
    env = cfg.env.build()
    scenes = env.scenes(cfg.eval.scenes)
    eps = cfg.eval.episodes_per_scene
    result = OrderingResult()
    for seed in seeds:
        ckpts = {}
        for method in methods:
            run = cfg.with_updates(run_id=f"{cfg.run_id}-{method}-s{seed}", model=TRAINED[method],
                                   train={"seed": seed})
            rdir = out / f"{method}-s{seed}"
            secs = _finished_seconds(run, rdir)
            if secs is None:
                write_config(run, rdir / "config.yaml")
                t0 = time.perf_counter()
                train(run.train.build(), run.model.build(), env, out_dir=rdir)
                secs = time.perf_counter() - t0
                (rdir / "train_seconds.json").write_text(json.dumps({"train_seconds": secs}))
                log.info("trained %s seed %d in %.0fs", method, seed, secs)
            else:
                log.info("reusing %s (trained in %.0fs)", rdir, secs)
            ckpts[method] = (rdir / "final.json", secs)
        eval_seed = cfg.eval.seed + seed
        for method, (path, secs) in ckpts.items():
            if method == "single":
                rep, _ = M.run_baseline("independent-two-agent", scenes, "heard", eps, eval_seed, checkpoint=path,
                                        max_steps=env.max_steps, greedy=cfg.eval.greedy)
                result.rows.append(_row(seed, rep, secs))
                continue
            params, mcfg, _ = load_model(path)
            policy = M.ModelPolicy(params, mcfg, method, cfg.eval.greedy)
            splits = ("heard", "unheard") if method == "mast" else ("heard",)
            for split in splits:
                rep, _ = M.evaluate(policy, scenes, split, eps, eval_seed, mcfg.n_agents, env.max_steps)
                result.rows.append(_row(seed, rep, secs))
        rep, _ = M.run_baseline("random-two-agent", scenes, "heard", eps, eval_seed, max_steps=env.max_steps)
        result.rows.append(_row(seed, rep))
    with open(out / "ordering.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ORDER_FIELDS)
        w.writeheader()
        w.writerows(result.rows)
    return result
