"""
Ablation table and an overlay image through the command line
============================================================

Everything here goes through ``secpnet.cli.run`` exactly as the
``secpnet`` console script would. The budget is tiny, so the numbers
only show the table layout, not a ranking of the variants.
"""

import json
import tempfile
from pathlib import Path

from secpnet.cli import run

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    run(["gen-data", "--seed", "3", "--patients", "6", "--slices", "2", "--size", "32", "--out", str(tmp / "data")])

    config = {
        "network": {"base_width": 4, "depth": 3},
        "train": {"lr0": 0.03, "dr": 0.0, "batch_size": 1, "momentum": 0.9},
        "stage_epochs": 2,
    }
    (tmp / "config.json").write_text(json.dumps(config))

    run(["ablate", "--data", str(tmp / "data"), "--out", str(tmp / "ablation"),
         "--config", str(tmp / "config.json"), "--folds", "3"])
    print(sorted(p.name for p in (tmp / "ablation").iterdir()))

    run(["train", "--variant", "SECPNet", "--data", str(tmp / "data"), "--folds", "3", "--fold", "0",
         "--config", str(tmp / "config.json"), "--out", str(tmp / "run")])
    stem = sorted((tmp / "data" / "samples").glob("*.image.bin"))[0].as_posix()[: -len(".image.bin")]
    run(["overlay", "--checkpoint", str(tmp / "run" / "fold0" / "final.ckpt"), "--sample", stem,
         "--out", str(tmp / "overlay.ppm")])
    header = (tmp / "overlay.ppm").read_bytes()[:13]
    print("overlay header", header)
