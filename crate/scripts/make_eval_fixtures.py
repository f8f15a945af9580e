"""Writes the metric fixtures in crates/core/tests/fixtures with expected
values computed here in numpy, independently of the Rust code."""
import json
import pathlib

import numpy as np
from PIL import Image

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "fixtures"
DILATION = 8


def features(x):
    lum = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, :-1] = lum[:, 1:] - lum[:, :-1]
    gy[:-1, :] = lum[1:, :] - lum[:-1, :]
    f = np.concatenate([x - 0.5, gx[None], gy[None]], 0)
    return f / (np.sqrt((f ** 2).sum(0, keepdims=True)) + 1e-10)


def down(x):
    c, h, w = x.shape
    x = x[:, : h // 2 * 2, : w // 2 * 2]
    return x.reshape(c, h // 2, 2, w // 2, 2).mean((2, 4))


def pyramid(a, b, levels=4):
    total = 0.0
    for level in range(levels):
        if level:
            if a.shape[1] < 2 or a.shape[2] < 2:
                break
            a, b = down(a), down(b)
        fa, fb = features(a), features(b)
        total += ((fa - fb) ** 2).sum() / (fa.shape[1] * fa.shape[2])
    return total


def dilate(m, r):
    h, w = m.shape
    out = np.zeros_like(m)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > r * r:
                continue
            src = np.zeros_like(m)
            ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
            xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
            src[yd, xd] = m[ys, xs]
            out |= src
    return out


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    h, w = 48, 40
    y, x = np.mgrid[0:h, 0:w]
    original = np.stack([(x / w), (y / h), 0.5 + 0.3 * np.sin(x / 4.0)], -1)
    edited = original + rng.normal(0, 0.08, size=original.shape)
    edited[14:30, 10:26] = rng.uniform(0, 1, size=(16, 16, 3))
    to8 = lambda a: (np.clip(a, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(to8(original)).save(OUT / "pair_original.png")
    Image.fromarray(to8(edited)).save(OUT / "pair_edited.png")
    mask = np.zeros((h, w), bool)
    mask[16:28, 12:24] = True
    Image.fromarray(mask.astype(np.uint8) * 255).save(OUT / "pair_mask.png")

    a = np.asarray(Image.open(OUT / "pair_original.png"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    b = np.asarray(Image.open(OUT / "pair_edited.png"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    region = dilate(mask, DILATION)
    a[:, region] = 0.0
    b[:, region] = 0.0

    img_emb = rng.normal(size=16)
    txt_emb = img_emb * 0.6 + rng.normal(size=16) * 0.8
    cos = img_emb @ txt_emb / (np.linalg.norm(img_emb) * np.linalg.norm(txt_emb))
    expected = {
        "background_distance": float(pyramid(a, b)),
        "full_distance": float(pyramid(
            np.asarray(Image.open(OUT / "pair_original.png"), dtype=np.float64).transpose(2, 0, 1) / 255.0,
            np.asarray(Image.open(OUT / "pair_edited.png"), dtype=np.float64).transpose(2, 0, 1) / 255.0,
        )),
        "image_embedding": img_emb.tolist(),
        "text_embedding": txt_emb.tolist(),
        "clip_score": float(100 * max(0.0, cos)),
    }
    (OUT / "metric_expected.json").write_text(json.dumps(expected, indent=2) + "\n")


if __name__ == "__main__":
    main()
