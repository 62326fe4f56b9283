"""Brute-force anchor statistics for two_images.json.

Standalone: reads the JSON with the standard library, builds the anchor grid
cell by cell, and computes AUC by enumerating every positive/negative pair.
Prints the values pinned in the anchor-stats golden test.
"""
import json
import math
import os
from fractions import Fraction


def load(path):
    with open(path) as f:
        doc = json.load(f)
    images = {im["id"]: (im["width"], im["height"]) for im in doc["images"]}
    gts = {i: [] for i in images}
    for a in doc["annotations"]:
        x, y, w, h = a["bbox"]
        if a.get("iscrowd", 0):
            continue
        gts[a["image_id"]].append((x, y, x + w, y + h))
    return images, gts


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def grid(width, height, m, n, d, s):
    rows = -(-height // s)
    cols = -(-width // s)
    w, h = n * d * s, m * d * s
    for r in range(rows):
        for c in range(cols):
            cx, cy = (c + 0.5) * s, (r + 0.5) * s
            yield (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def stats(images, gts, m, n, d, s):
    best, pos, neg = [], [], []
    for img in sorted(images):
        g = gts[img]
        if not g:
            continue
        anchors = list(grid(*images[img], m, n, d, s))
        for box in g:
            best.append(max(iou(a, box) for a in anchors))
        for a in anchors:
            score = max(iou(a, box) for box in g)
            cx, cy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
            inside = any(b[0] <= cx <= b[2] and b[1] <= cy <= b[3] for b in g)
            (pos if inside else neg).append(score)
    wins = Fraction(0)
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                wins += Fraction(1, 2)
    auc = wins / (len(pos) * len(neg))
    return sum(best) / len(best), float(auc), len(pos), len(neg)


if __name__ == "__main__":
    here = os.path.dirname(os.path.abspath(__file__))
    images, gts = load(os.path.join(here, "two_images.json"))
    for d, s in [(2, 8), (4, 32)]:
        mbi, auc, p, q = stats(images, gts, 3, 3, d, s)
        print(f"d={d} s={s} mean_best_iou={mbi!r} auc={auc!r} positives={p} negatives={q}")
