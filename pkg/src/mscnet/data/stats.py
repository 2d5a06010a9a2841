"""Per-image change-ratio statistics over a manifest."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from ..formats import read_pnm

DEFAULT_EDGES = tuple(range(1, 11))


def change_ratio_stats(manifest: Sequence[Dict[str, str]], root=".",
                       edges_pct: Sequence[float] = DEFAULT_EDGES) -> dict:
    """Histogram of changed-pixel ratios; unchanged images are excluded."""
    root = Path(root)
    ratios = []
    unchanged = 0
    for entry in manifest:
        label = read_pnm(root / entry["label"]) >= 128
        pos = int(label.sum())
        if pos == 0:
            unchanged += 1
            continue
        ratios.append(100.0 * pos / label.size)
    counts = [0] * len(edges_pct)
    overflow = 0
    for r in ratios:
        for i, hi in enumerate(edges_pct):
            if r <= hi:
                counts[i] += 1
                break
        else:
            overflow += 1
    n = len(ratios)
    buckets = [{"max_pct": e, "proportion": (c / n if n else 0.0)} for e, c in zip(edges_pct, counts)]
    if overflow:
        buckets.append({"max_pct": None, "proportion": overflow / n})
    return {
        "mean_ratio_pct": float(np.mean(ratios)) if n else 0.0,
        "buckets": buckets,
        "changed": n,
        "unchanged": unchanged,
    }


def proportion_below(stats: dict, pct: float) -> float:
    return sum(b["proportion"] for b in stats["buckets"] if b["max_pct"] is not None and b["max_pct"] <= pct)


def ascii_table(stats: dict, width: int = 40) -> str:
    if stats["changed"] == 0:
        return f"0 changed images ({stats['unchanged']} unchanged)"
    lines = [f"{stats['changed']} changed images, {stats['unchanged']} unchanged, "
             f"mean change ratio {stats['mean_ratio_pct']:.2f}%"]
    prev = 0
    for b in stats["buckets"]:
        label = f"{prev}-{b['max_pct']}%" if b["max_pct"] is not None else f">{prev}%"
        bar = "#" * int(round(b["proportion"] * width))
        lines.append(f"{label:>8} | {bar:<{width}} {100 * b['proportion']:5.1f}%")
        prev = b["max_pct"]
    return "\n".join(lines)
