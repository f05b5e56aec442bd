"""Segmentation scores and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def _as_binary(mask, what):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"{what} must be a 2-D mask, got shape {m.shape}")
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{what} is not binary")
        m = m.astype(bool)
    return m


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels on the image border count as touching background.
    """
    m = _as_binary(mask, "mask")
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def surface_dice(pred, truth, tolerance_px: float = 1.0) -> float:
    """Fraction of both boundaries lying within ``tolerance_px`` of the other.

    Distances are exact Euclidean. Two empty masks score 1, one empty mask 0.
    """
    p = _as_binary(pred, "pred")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if tolerance_px < 0:
        raise ValueError("tolerance must be non-negative")
    p_any, t_any = p.any(), t.any()
    if not p_any and not t_any:
        return 1.0
    if not p_any or not t_any:
        return 0.0
    bp, bt = boundary(p), boundary(t)
    dist_to_t = ndimage.distance_transform_edt(~bt)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    hits = np.count_nonzero(dist_to_t[bp] <= tolerance_px) + np.count_nonzero(dist_to_p[bt] <= tolerance_px)
    return hits / (np.count_nonzero(bp) + np.count_nonzero(bt))


def volumetric_dice(pred, truth) -> float:
    p = _as_binary(pred, "pred")
    t = _as_binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    denom = np.count_nonzero(p) + np.count_nonzero(t)
    if denom == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & t) / denom


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    layers: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def reduction_percent(self) -> float:
        if self.total_params == 0:
            return 100.0
        return 100.0 * (1.0 - self.trainable_params / self.total_params)

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params if self.total_params else 0.0

    def format(self) -> str:
        lines = [f"{'layer':<28} {'params':>12} {'trainable':>12} {'share':>8}"]
        for name, total, trainable in self.layers:
            share = 100.0 * trainable / total if total else 0.0
            lines.append(f"{name:<28} {total:>12,} {trainable:>12,} {share:>7.2f}%")
        lines.append(f"{'TOTAL':<28} {self.total_params:>12,} {self.trainable_params:>12,}")
        lines.append(f"trainable fraction: {100 * self.trainable_fraction:.4f}%")
        lines.append(f"reduction: {self.reduction_percent:.2f}%")
        return "\n".join(lines)


def param_report(model, include_esh: bool = True) -> ParamReport:
    """Parameter totals grouped per layer, split by freeze flag."""
    params = model.parameters()
    flags = model.freeze_flags()
    grouped: dict[str, list[int]] = {}
    for name, value in params.items():
        if not include_esh and name.startswith("esh"):
            continue
        layer = name.rsplit(".", 1)[0]
        entry = grouped.setdefault(layer, [0, 0])
        entry[0] += value.size
        if not flags[name]:
            entry[1] += value.size
    layers = [(k, v[0], v[1]) for k, v in grouped.items()]
    return ParamReport(sum(v[1] for v in layers), sum(v[2] for v in layers), layers)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(sorted(values), dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def format_records(records, summary=None, tag: str = "") -> str:
    """Line-oriented report: one ``image`` record per row plus ``summary`` rows.

    ``records`` are ``(domain, image_id, sds, dice)`` tuples. ``tag`` (for
    example ``seed=1``) is inserted after the domain on every line.
    """
    sep = f" {tag}" if tag else ""
    lines = []
    for domain, image_id, sds, dice in records:
        lines.append(f"image domain={domain}{sep} id={image_id} sds={sds:.6f} dice={dice:.6f}")
    by_domain: dict[str, list] = {}
    for domain, _, sds, dice in records:
        by_domain.setdefault(domain, []).append((sds, dice))
    for domain in sorted(by_domain):
        vals = np.asarray(by_domain[domain])
        sm, ss = mean_std(vals[:, 0])
        dm, ds = mean_std(vals[:, 1])
        lines.append(
            f"summary domain={domain}{sep} n={len(vals)} sds_mean={sm:.6f} sds_std={ss:.6f} "
            f"dice_mean={dm:.6f} dice_std={ds:.6f}"
        )
    for row in summary or []:
        lines.append(row)
    return "\n".join(lines) + "\n"
