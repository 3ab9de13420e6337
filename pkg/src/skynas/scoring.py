"""DAC-SDC scoring: IoU, mean IoU, energy score, total score; plus tracking AO/SR.

Degenerate conventions:

* two boxes with zero-area union have IoU 1 if they are the same point,
  else 0;
* a zero-area ground truth against a positive-area prediction scores 0;
* success rate counts IoUs strictly above the threshold by default.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box

FPGA_LOG_BASE = 2
GPU_LOG_BASE = 10
TRACK_LOG_BASE = {"fpga": FPGA_LOG_BASE, "gpu": GPU_LOG_BASE}


class ScoringError(ValueError):
    pass


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 1.0 if a.as_tuple() == b.as_tuple() else 0.0
    return inter / union


def iou_array(pred, gt):
    """Row-wise IoU of (N, 4) corner arrays, same degenerate conventions as :func:`iou`."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    iw = np.minimum(pred[:, 2], gt[:, 2]) - np.maximum(pred[:, 0], gt[:, 0])
    ih = np.minimum(pred[:, 3], gt[:, 3]) - np.maximum(pred[:, 1], gt[:, 1])
    inter = np.maximum(iw, 0) * np.maximum(ih, 0)
    area = lambda b: (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area(pred) + area(gt) - inter
    same = np.all(pred == gt, axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), same)


def _nonempty(values, what):
    values = list(values)
    if not values:
        raise ScoringError(f"{what} needs at least one value")
    return values


def r_iou(ious) -> float:
    """Mean IoU over a team's K test images."""
    ious = _nonempty(ious, "R_IoU")
    return math.fsum(ious) / len(ious)


def mean_energy(energies) -> float:
    energies = _nonempty(energies, "mean energy")
    return math.fsum(energies) / len(energies)


def energy_score(e_team, e_mean, x) -> float:
    """``max(0, 1 + 0.2 * log_x(e_mean / e_team))``; x is 2 (FPGA) or 10 (GPU)."""
    if e_team <= 0 or e_mean <= 0:
        raise ScoringError(f"energies must be positive, got team={e_team}, mean={e_mean}")
    if x <= 0 or x == 1:
        raise ScoringError(f"invalid log base {x}")
    return max(0.0, 1.0 + 0.2 * math.log(e_mean / e_team, x))


def total_score(r_iou_value, es) -> float:
    return r_iou_value * (1.0 + es)


def ao(ious) -> float:
    """Average overlap of a tracking sequence."""
    ious = _nonempty(ious, "AO")
    return math.fsum(ious) / len(ious)


def sr(ious, threshold, strict=True) -> float:
    """Fraction of frames whose IoU is above ``threshold``."""
    ious = _nonempty(ious, "SR")
    if not 0 < threshold < 1:
        raise ScoringError(f"SR threshold must be in (0, 1), got {threshold}")
    hits = sum((v > threshold) if strict else (v >= threshold) for v in ious)
    return hits / len(ious)


@dataclass(frozen=True)
class TeamResult:
    team_id: str
    ious: tuple
    energy_joules: float

    def __post_init__(self):
        if self.energy_joules <= 0:
            raise ScoringError(f"team {self.team_id}: energy must be positive")
        if any(not 0 <= v <= 1 for v in self.ious):
            raise ScoringError(f"team {self.team_id}: IoU values must lie in [0, 1]")


@dataclass(frozen=True)
class LeaderboardRow:
    team: str
    r_iou: float
    es: float
    ts: float


def leaderboard(results, track="fpga"):
    """Score every team; sorted by total score descending, then team id."""
    if track not in TRACK_LOG_BASE:
        raise ScoringError(f"track must be one of {sorted(TRACK_LOG_BASE)}, got {track!r}")
    results = _nonempty(results, "leaderboard")
    e_mean = mean_energy([r.energy_joules for r in results])
    rows = []
    for r in results:
        riou = r_iou(r.ious)
        es = energy_score(r.energy_joules, e_mean, TRACK_LOG_BASE[track])
        rows.append(LeaderboardRow(r.team_id, riou, es, total_score(riou, es)))
    rows.sort(key=lambda row: (-row.ts, row.team))
    return rows


# --- CSV ingestion ---------------------------------------------------------------

BOX_FIELDS = ("image_id", "x_min", "y_min", "x_max", "y_max")


def read_box_csv(path):
    """``{image_id: Box}`` from a CSV with header image_id,x_min,y_min,x_max,y_max."""
    path = Path(path)
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != BOX_FIELDS:
            raise ScoringError(f"{path}: header must be {','.join(BOX_FIELDS)}, got {reader.fieldnames}")
        for n, row in enumerate(reader, start=2):
            try:
                box = Box(*(float(row[k]) for k in BOX_FIELDS[1:]))
            except (TypeError, ValueError) as e:
                raise ScoringError(f"{path}:{n}: bad box row {row}: {e}") from None
            if row["image_id"] in out:
                raise ScoringError(f"{path}:{n}: duplicate image_id {row['image_id']!r}")
            out[row["image_id"]] = box
    return out


def read_team_energies(path):
    path = Path(path)
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ("team_id", "energy_joules"):
            raise ScoringError(f"{path}: header must be team_id,energy_joules")
        for n, row in enumerate(reader, start=2):
            try:
                out[row["team_id"]] = float(row["energy_joules"])
            except (TypeError, ValueError):
                raise ScoringError(f"{path}:{n}: bad energy value {row['energy_joules']!r}") from None
    return out


def team_ious(pred, gt, path="predictions"):
    """IoU per ground-truth image; a missing prediction scores 0."""
    extra = sorted(set(pred) - set(gt))
    if extra:
        raise ScoringError(f"{path}: predictions for unknown image ids {extra[:5]}")
    return tuple(iou(pred[k], gt[k]) if k in pred else 0.0 for k in sorted(gt))
