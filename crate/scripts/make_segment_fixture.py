"""Writes a recorded text-phrase segmentation response for micro-subset
sample m001 (RLE of its mask, runs start with zeros)."""
import json
import pathlib

import numpy as np
from PIL import Image

ROOT = pathlib.Path(__file__).resolve().parent.parent
mask = np.asarray(Image.open(ROOT / "datasets/imba-micro/masks/m001.png")) >= 128
counts, cur, run = [], False, 0
for bit in mask.reshape(-1):
    if bit == cur:
        run += 1
    else:
        counts.append(run)
        cur, run = bit, 1
counts.append(run)
record = [
    {
        "query": {"kind": "text_phrase", "phrase": "the ball"},
        "response": {"mask": {"height": mask.shape[0], "width": mask.shape[1], "counts": counts}, "confidence": 0.97},
    }
]
(ROOT / "crates/core/tests/fixtures/segment_replay.json").write_text(json.dumps(record) + "\n")
