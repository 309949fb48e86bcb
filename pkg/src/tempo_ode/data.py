"""Irregular time-series data model, synthetic generator, CSV io.

A series keeps two disjoint masks: `mask` marks points a model may train
on, `heldout_mask` marks points reserved for evaluation only. Generation
is deterministic per (spec, sample index) so datasets reproduce exactly.

CSV schema: header `sample_id,time,<f1>,...,<fD>[,label]`, empty cell =
missing, "." decimal separator, times ascending within a sample after
sorting. A sibling `<name>.heldout.csv` with identical layout marks
heldout cells by presence.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DuplicateTimeError,
    InvalidSpecError,
    NonMonotoneTimesError,
    ParseError,
)


@dataclass
class IrregularSeries:
    sample_id: str
    times: np.ndarray          # (T,) strictly increasing
    values: np.ndarray         # (T, D)
    mask: np.ndarray           # (T, D) 1 = train-observable
    heldout_mask: np.ndarray   # (T, D) 1 = evaluation-only
    label: Optional[np.ndarray] = None  # scalar class id or per-time vector

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.heldout_mask = np.asarray(self.heldout_mask, dtype=np.float64)
        if self.times.ndim != 1 or self.values.ndim != 2:
            raise InvalidSpecError("series needs 1-d times and 2-d values")
        t, d = self.values.shape
        if self.times.size != t or self.mask.shape != (t, d) \
                or self.heldout_mask.shape != (t, d):
            raise InvalidSpecError("series arrays disagree on shape")
        if np.any(np.diff(self.times) <= 0):
            raise NonMonotoneTimesError(f"sample {self.sample_id}: times not strictly increasing")
        if np.any((self.mask > 0) & (self.heldout_mask > 0)):
            raise InvalidSpecError("a point cannot be both observed and heldout")
        touched = (self.mask > 0) | (self.heldout_mask > 0)
        if not np.all(np.isfinite(self.values[touched])):
            raise InvalidSpecError("non-finite value at an observed or heldout point")

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "IrregularSeries":
        return IrregularSeries(
            self.sample_id,
            self.times.copy(),
            self.values.copy(),
            self.mask.copy(),
            self.heldout_mask.copy(),
            None if self.label is None else np.array(self.label),
        )


@dataclass
class SyntheticSpec:
    n_samples: int = 100
    t_grid: int = 100
    t_span: tuple[float, float] = (0.0, 5.0)
    freq_range: tuple[float, float] = (1.0, 3.0)   # cycles per span
    amp_range: tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.05
    discontinuity_prob: float = 0.3
    jump_range: tuple[float, float] = (0.5, 1.5)
    sparsity: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples <= 0 or self.t_grid <= 1:
            raise InvalidSpecError("need n_samples > 0 and t_grid > 1")
        if not (0.0 < self.sparsity <= 1.0):
            raise InvalidSpecError("sparsity must be in (0, 1]")
        if self.t_span[0] >= self.t_span[1]:
            raise InvalidSpecError("t_span must be ordered")
        for name in ("freq_range", "amp_range", "jump_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidSpecError(f"{name} must be ordered")
        if self.noise_sigma < 0 or not (0.0 <= self.discontinuity_prob <= 1.0):
            raise InvalidSpecError("bad noise or discontinuity settings")


@dataclass
class DatasetSplit:
    train: list[IrregularSeries]
    validation: list[IrregularSeries]
    test: list[IrregularSeries]
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    def all_series(self) -> list[IrregularSeries]:
        return self.train + self.validation + self.test


def generate_synthetic(spec: SyntheticSpec) -> list[IrregularSeries]:
    """Noisy sine trajectories with optional one-step discontinuities.

    y(t) = A sin(2 pi f t / span + phase) [+ jump after a random time] + noise.
    Exactly ceil(sparsity * t_grid) grid points per sample are observed;
    every other grid point is heldout. Sample i uses seed + i, so the
    dataset is reproducible sample by sample.
    """
    spec.validate()
    t0, t1 = spec.t_span
    span = t1 - t0
    grid = np.linspace(t0, t1, spec.t_grid)
    n_obs = math.ceil(spec.sparsity * spec.t_grid)
    out = []
    for i in range(spec.n_samples):
        rng = np.random.default_rng(spec.seed + i)
        freq = rng.uniform(*spec.freq_range)
        amp = rng.uniform(*spec.amp_range)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        y = amp * np.sin(2.0 * math.pi * freq * (grid - t0) / span + phase)
        if rng.uniform() < spec.discontinuity_prob:
            jump = rng.uniform(*spec.jump_range) * rng.choice([-1.0, 1.0])
            t_jump = rng.uniform(t0, t1)
            y = y + jump * (grid >= t_jump)
        if spec.noise_sigma > 0:
            y = y + rng.normal(0.0, spec.noise_sigma, size=y.shape)
        obs_idx = rng.choice(spec.t_grid, size=n_obs, replace=False)
        mask = np.zeros((spec.t_grid, 1))
        mask[obs_idx, 0] = 1.0
        heldout = 1.0 - mask
        out.append(IrregularSeries(
            sample_id=f"s{i:04d}",
            times=grid.copy(),
            values=y[:, None],
            mask=mask,
            heldout_mask=heldout,
        ))
    return out


def split_dataset(series: list[IrregularSeries], val_fraction: float,
                  test_fraction: float, seed: int) -> DatasetSplit:
    """Disjoint train/validation/test split by seeded shuffle."""
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise InvalidSpecError("bad split fractions")
    idx = np.random.default_rng(seed).permutation(len(series))
    n_test = int(round(test_fraction * len(series)))
    n_val = int(round(val_fraction * (len(series) - n_test)))
    test = [series[i] for i in idx[:n_test]]
    val = [series[i] for i in idx[n_test:n_test + n_val]]
    train = [series[i] for i in idx[n_test + n_val:]]
    return DatasetSplit(train=train, validation=val, test=test)


def normalize(split: DatasetSplit) -> DatasetSplit:
    """Standardize values in place using train observed statistics.

    Features with fewer than two observed train points, or zero spread,
    are left untouched (mean 0, std 1 recorded). Observed and heldout
    positions are transformed; unobserved placeholders are zeroed so they
    stay finite but carry no information.
    """
    if not split.train:
        raise InvalidSpecError("cannot normalize an empty train split")
    d = split.train[0].n_features
    mean = np.zeros(d)
    std = np.ones(d)
    for j in range(d):
        vals = np.concatenate([s.values[s.mask[:, j] > 0, j] for s in split.train])
        if vals.size >= 2:
            sd = vals.std()
            if sd > 1e-12:
                mean[j] = vals.mean()
                std[j] = sd
    for s in split.all_series():
        touched = (s.mask > 0) | (s.heldout_mask > 0)
        s.values = np.where(touched, (s.values - mean) / std, 0.0)
    split.norm_mean = mean
    split.norm_std = std
    return split


def denormalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


@dataclass
class Batch:
    sample_ids: list[str]
    times: np.ndarray          # (T_union,)
    values: np.ndarray         # (B, T_union, D)
    mask: np.ndarray           # (B, T_union, D)
    heldout_mask: np.ndarray   # (B, T_union, D)
    labels: Optional[np.ndarray] = None


def batch(series: list[IrregularSeries], indices) -> Batch:
    """Align the chosen samples to the union of their time grids.

    Masks are zero wherever a sample has no point at a union time, so one
    solver pass can serve the whole batch.
    """
    members = [series[i] for i in indices]
    if not members:
        raise InvalidSpecError("empty batch")
    d = members[0].n_features
    union = np.unique(np.concatenate([m.times for m in members]))
    b = len(members)
    t = union.size
    values = np.zeros((b, t, d))
    mask = np.zeros((b, t, d))
    heldout = np.zeros((b, t, d))
    for bi, m in enumerate(members):
        pos = np.searchsorted(union, m.times)
        values[bi, pos, :] = m.values
        mask[bi, pos, :] = m.mask
        heldout[bi, pos, :] = m.heldout_mask
    labels = None
    if all(m.label is not None for m in members):
        labels = np.stack([np.asarray(m.label) for m in members])
    return Batch(
        sample_ids=[m.sample_id for m in members],
        times=union,
        values=values,
        mask=mask,
        heldout_mask=heldout,
        labels=labels,
    )


def _format_value(v: float) -> str:
    return repr(float(v))


def write_csv(series: list[IrregularSeries], path: str,
              feature_names: Optional[list[str]] = None,
              use_mask: str = "mask") -> None:
    """Write the dataset in the library's CSV schema.

    `use_mask` selects which mask decides cell presence: "mask" writes the
    observed view, "heldout" writes the sibling heldout view.
    """
    if not series:
        raise InvalidSpecError("nothing to write")
    d = series[0].n_features
    names = feature_names or [f"f{j + 1}" for j in range(d)]
    has_label = any(s.label is not None for s in series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["sample_id", "time"] + names
        if has_label:
            header.append("label")
        w.writerow(header)
        for s in series:
            which = s.mask if use_mask == "mask" else s.heldout_mask
            for i, t in enumerate(s.times):
                row = [s.sample_id, _format_value(t)]
                for j in range(d):
                    row.append(_format_value(s.values[i, j]) if which[i, j] > 0 else "")
                if has_label:
                    if s.label is None:
                        row.append("")
                    elif np.asarray(s.label).ndim == 0:
                        row.append(_format_value(float(s.label)))
                    else:
                        row.append(_format_value(float(np.asarray(s.label)[i])))
                w.writerow(row)


def load_csv(path: str) -> list[IrregularSeries]:
    """Parse the CSV schema into one series per sample id.

    Rows are grouped by sample and sorted by time; duplicate times within
    a sample are rejected. Empty cells get mask 0 and a zero placeholder.
    """
    with open(path, newline="") as fh:
        return _parse_csv(fh, path)


def _parse_csv(fh, origin: str) -> list[IrregularSeries]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{origin}: empty file")
    if len(header) < 3 or header[0] != "sample_id" or header[1] != "time":
        raise ParseError(f"{origin}: header must start with sample_id,time,<features>")
    has_label = header[-1] == "label"
    d = len(header) - 2 - (1 if has_label else 0)
    if d < 1:
        raise ParseError(f"{origin}: no feature columns")

    rows: dict[str, list] = {}
    order: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{origin}: wrong column count", row=lineno)
        sid = row[0]
        try:
            t = float(row[1])
        except ValueError:
            raise ParseError(f"{origin}: bad time '{row[1]}'", row=lineno, col=2)
        vals = np.zeros(d)
        mask = np.zeros(d)
        for j in range(d):
            cell = row[2 + j].strip()
            if cell:
                try:
                    vals[j] = float(cell)
                except ValueError:
                    raise ParseError(f"{origin}: bad value '{cell}'", row=lineno, col=3 + j)
                mask[j] = 1.0
        label = None
        if has_label and row[-1].strip():
            try:
                label = float(row[-1])
            except ValueError:
                raise ParseError(f"{origin}: bad label '{row[-1]}'", row=lineno)
        if sid not in rows:
            rows[sid] = []
            order.append(sid)
        rows[sid].append((t, vals, mask, label))

    out = []
    for sid in order:
        entries = sorted(rows[sid], key=lambda e: e[0])
        times = np.array([e[0] for e in entries])
        if np.unique(times).size != times.size:
            raise DuplicateTimeError(f"{origin}: sample {sid} has duplicate times")
        values = np.stack([e[1] for e in entries])
        mask = np.stack([e[2] for e in entries])
        labels = [e[3] for e in entries]
        label = None
        if any(l is not None for l in labels):
            filled = [l for l in labels if l is not None]
            if len(set(filled)) == 1 and len(filled) == len(labels):
                label = np.asarray(filled[0])
            else:
                label = np.asarray([l if l is not None else np.nan for l in labels])
        out.append(IrregularSeries(sid, times, values, mask,
                                   np.zeros_like(mask), label))
    return out


def load_csv_with_heldout(path: str, heldout_path: Optional[str] = None
                          ) -> list[IrregularSeries]:
    """Load a dataset plus its sibling heldout view when present."""
    base = load_csv(path)
    if heldout_path is None:
        heldout_path = path[:-4] + ".heldout.csv" if path.endswith(".csv") else path + ".heldout.csv"
    if not os.path.exists(heldout_path):
        return base
    extra = {s.sample_id: s for s in load_csv(heldout_path)}
    for s in base:
        if s.sample_id not in extra:
            continue
        e = extra[s.sample_id]
        if e.times.size != s.times.size or not np.allclose(e.times, s.times):
            raise ParseError(f"heldout grid of sample {s.sample_id} does not match")
        takes = (e.mask > 0) & (s.mask == 0)
        s.values = np.where(takes, e.values, s.values)
        s.heldout_mask = takes.astype(np.float64)
    return base
