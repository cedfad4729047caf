import csv

from mastavn.config import loads_config
from mastavn.experiments import OrderingResult, run_ordering

TINY = """\
run_id: tiny
train:
  total_env_steps: 32
  horizon: 4
  n_envs: 4
model:
  d_model: 8
  n_heads: 2
  n_encoder_layers: 1
  n_decoder_layers: 1
  mlp_ratio: 2
env:
  height: 6
  width: 6
  wall_density: 0.1
  train_scenes: {start: 1, stop: 3}
  max_steps: 10
eval:
  scenes: [7]
  episodes_per_scene: 2
"""


def test_ordering_rows_and_reuse(tmp_path):
    cfg = loads_config(TINY)
    first = run_ordering(cfg, seeds=(0,), out_dir=tmp_path)
    labels = {(r["method"], r["split"]) for r in first.rows}
    assert labels == {("mast", "heard"), ("mast", "unheard"), ("independent-two-agent", "heard"),
                      ("wo-en", "heard"), ("wo-de", "heard"), ("random-two-agent", "heard")}
    with open(tmp_path / "ordering.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(first.rows)
    mtime = (tmp_path / "mast-s0" / "final.json").stat().st_mtime_ns
    second = run_ordering(cfg, seeds=(0,), out_dir=tmp_path)
    assert (tmp_path / "mast-s0" / "final.json").stat().st_mtime_ns == mtime
    assert [r["SR"] for r in second.rows] == [r["SR"] for r in first.rows]
    # a changed config retrains
    run_ordering(cfg.with_updates(train={"lr": 2e-4}), seeds=(0,), out_dir=tmp_path, methods=("mast",))
    assert (tmp_path / "mast-s0" / "final.json").stat().st_mtime_ns != mtime


def test_checks_use_mean_gaps():
    rows = []
    for seed in range(2):
        for method, sr in (("mast", 0.9), ("independent-two-agent", 0.75), ("random-two-agent", 0.6),
                           ("wo-en", 0.8), ("wo-de", 0.8)):
            rows.append({"seed": seed, "method": method, "split": "heard", "SR": sr})
        rows.append({"seed": seed, "method": "mast", "split": "unheard", "SR": 0.9 - seed})
    c = OrderingResult(rows).checks()
    assert c["mast > independent"] and c["independent > random"] and c["full > wo-en"]
    assert not c["wo-en > wo-de"] and c["unheard <= heard"]
