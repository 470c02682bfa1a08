#!/usr/bin/env python3
"""Run the whole pipeline once at toy scale: data, training, sampling,
a text edit, and one retargeting, all under ./runs/demo. Takes a couple of
minutes on a laptop CPU."""
import sys
from pathlib import Path

from skelflow.cli import main

ROOT = Path("runs/demo")
CFG = Path(__file__).resolve().parents[1] / "configs" / "desk_quick.yaml"


def run(*argv: str) -> None:
    print("$ skelflow " + " ".join(argv))
    rc = main(list(argv))
    if rc != 0:
        sys.exit(rc)


if __name__ == "__main__":
    cfg = str(CFG)
    ckpt = str(ROOT / "train" / "model_final.npz")
    run("synth-data", "--config", cfg, "--out-dir", str(ROOT / "data"))
    run("train", "--config", cfg, "--split", "all", "--out-dir", str(ROOT / "train"))
    run("sample", "--config", cfg, "--ckpt", ckpt, "--prompt", "walk fast",
        "--out-dir", str(ROOT / "sample"))
    run("edit", "--config", cfg, "--ckpt", ckpt, "--index", "0",
        "--tgt-prompt", "wave", "--out-dir", str(ROOT / "edit"))
    run("retarget", "--config", cfg, "--ckpt", ckpt, "--index", "0",
        "--legs", "1.2", "--out-dir", str(ROOT / "retarget"))
    run("eval", "--config", cfg, "--ckpt", ckpt, "--pairs", "5",
        "--out-dir", str(ROOT / "eval"))
    print(f"artifacts under {ROOT}/")
