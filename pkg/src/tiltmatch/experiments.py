"""Desk-scale maze ablation: pretrain once, then fine-tune under the
(c, h) settings at matched compute and tabulate the final metrics."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from . import cli

ABLATION = (("c1_h2.5", 1.0, 2.5), ("c0_h7.5", 0.0, 7.5))


def maze_ablation(out, seed: int = 0, config: str | None = None, runs=ABLATION) -> dict:
    """Run the ablation under ``out`` and return {name: final metrics}.

    Raises RuntimeError if any stage exits nonzero.
    """
    out = Path(out)
    common = ["--seed", str(seed)] + (["--config", config] if config else [])

    def run(*argv):
        code = cli.main([*argv, *common])
        if code != 0:
            raise RuntimeError(f"`tiltmatch {' '.join(argv)}` exited with {code}")

    run("pretrain", "--out", str(out / "pretrain"))
    base_ckpt = str(out / "pretrain" / "base.ckpt")
    run("eval", "--out", str(out / "eval_base"), "--checkpoint", base_ckpt, "--svg")
    results = {}
    rows = []
    for name, c, h in runs:
        run("finetune", "--out", str(out / name), "--base", base_ckpt, "--c", str(c), "--h", str(h))
        summary = json.loads((out / name / "summary.json").read_text())
        results["base"] = summary["base"]
        results[name] = summary["final"]
        rows.append({"run": name, "c": c, "h": h, "phases": summary["phases"],
                     "steps_per_phase": summary["steps_per_phase"], **summary["final"]})
        run("eval", "--out", str(out / f"eval_{name}"), "--checkpoint",
            str(out / name / "final.ckpt"), "--svg")
    rows.insert(0, {"run": "base", "c": "", "h": "", "phases": 0, "steps_per_phase": 0,
                    **results["base"]})
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: cli._fmt(v) for k, v in row.items()})
    return results
