"""Writes the synthetic 6-sample micro-subset under datasets/imba-micro."""
import json
import math
import pathlib

import numpy as np
from PIL import Image, ImageDraw

ROOT = pathlib.Path(__file__).resolve().parent.parent / "datasets" / "imba-micro"
SIDE = 128

SAMPLES = [
    ("m001", "replace_object", False, "a photo of an orange on a table", "orange", "ellipse", (40, 50, 84, 94)),
    ("m002", "change_pose_view", True, "a photo of a cat looking left", "cat", "rectangle", (36, 30, 92, 100)),
    ("m003", "alter_background", True, "a dog on a sandy beach", "dog", "ellipse", (30, 40, 98, 108)),
    ("m004", "remove_object", False, "", "", "rectangle", (50, 20, 80, 60)),
    ("m005", "modify_region", False, "a red vase with flowers", "vase", "ellipse", (44, 24, 84, 104)),
    ("m006", "replace_object", True, "a photo of a golden cup", "cup", "rectangle", (20, 60, 60, 110)),
]


def background(seed):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:SIDE, 0:SIDE] / SIDE
    base = rng.uniform(0.2, 0.8, size=3)
    img = np.stack([base[c] + 0.25 * np.sin(2 * math.pi * (x * (c + 1) + y * (2 - c)) / 1.5) for c in range(3)], -1)
    img += rng.normal(0, 0.02, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def main():
    (ROOT / "images").mkdir(parents=True, exist_ok=True)
    (ROOT / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (sid, task, retain, prompt, word, shape, box) in enumerate(SAMPLES):
        img = Image.fromarray(background(i))
        mask = Image.new("L", (SIDE, SIDE), 0)
        colour = tuple(int(v) for v in np.random.default_rng(100 + i).integers(30, 225, size=3))
        for target, fill in ((ImageDraw.Draw(img), colour), (ImageDraw.Draw(mask), 255)):
            getattr(target, shape)(box, fill=fill)
        img.save(ROOT / "images" / f"{sid}.png")
        mask.save(ROOT / "masks" / f"{sid}.png")
        records.append(
            {
                "id": sid,
                "image": f"images/{sid}.png",
                "target_prompt": prompt,
                "source_mask": f"masks/{sid}.png",
                "task": task,
                "retain_object": retain,
                "object_word": word,
                "notes": "synthetic",
            }
        )
    bg = sum(r["task"] == "alter_background" for r in records)
    manifest = {
        "partial": True,
        "counts": {
            "total": len(records),
            "retention": sum(r["retain_object"] for r in records),
            "modification": len(records) - bg,
            "background": bg,
        },
        "samples": records,
    }
    (ROOT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
