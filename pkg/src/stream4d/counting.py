"""Electron-counting reduction: threshold estimation and event extraction.

Frames are reduced to sparse lists of electron-strike pixel indices.
Candidates are dark-subtracted pixels strictly between the background
and x-ray thresholds; an event is a candidate that is a strict local
maximum over its neighborhood, with equal-valued plateaus resolved to
the lowest row-major index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

log = logging.getLogger(__name__)

XRAY_SIGMA = 10.0          # fixed multiplier for the x-ray threshold
DEFAULT_BACKGROUND_SIGMA = 4.0
DEFAULT_SAMPLE_COUNT = 100
FIT_WINDOW_SIGMA = 5.0
FIT_MAX_ITERATIONS = 100
CLIP_ITERATIONS = 3
CLIP_SIGMA = 3.0


@dataclass(frozen=True)
class Thresholds:
    mean: float
    stddev: float
    n_sigma: float = DEFAULT_BACKGROUND_SIGMA
    m_sigma: float = XRAY_SIGMA
    degenerate: bool = False

    @property
    def background(self) -> float:
        return self.mean + self.n_sigma * self.stddev

    @property
    def xray(self) -> float:
        return self.mean + self.m_sigma * self.stddev


@dataclass(frozen=True)
class EventList:
    frame_number: int
    pixels: np.ndarray  # sorted u32 row-major indices

    def __eq__(self, other):
        if not isinstance(other, EventList):
            return NotImplemented
        return (self.frame_number == other.frame_number
                and np.array_equal(self.pixels, other.pixels))


def _gaussian(x, amplitude, mean, stddev):
    return amplitude * np.exp(-0.5 * ((x - mean) / stddev) ** 2)


def _sigma_clipped_moments(values: np.ndarray) -> tuple[float, float]:
    vals = values
    for _ in range(CLIP_ITERATIONS):
        mu = float(vals.mean())
        sigma = float(vals.std())
        if sigma == 0:
            return mu, 0.0
        keep = np.abs(vals - mu) <= CLIP_SIGMA * sigma
        vals = vals[keep]
        if vals.size == 0:
            return mu, sigma
    return float(vals.mean()), float(vals.std())


def estimate_thresholds(sample_frames: list[np.ndarray] | np.ndarray,
                        n_sigma: float = DEFAULT_BACKGROUND_SIGMA,
                        dark: np.ndarray | None = None,
                        bin_width: float = 1.0) -> Thresholds:
    """Fit a Gaussian to the pixel-value histogram of sampled frames.

    The fit is least-squares over bins within +-5 initial stddev of the
    initial mean, seeded from the sample moments. Degenerate fits fall
    back to sigma-clipped moments and set the degenerate flag.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in sample_frames]
    if not frames:
        raise ValueError("need at least one sample frame")
    if dark is not None:
        frames = [f - dark for f in frames]
    values = np.concatenate([f.ravel() for f in frames])

    mu0 = float(values.mean())
    sigma0 = float(values.std())
    if sigma0 <= 0:
        mu, sigma = _sigma_clipped_moments(values)
        return Thresholds(mu, sigma, n_sigma, degenerate=True)

    lo = mu0 - FIT_WINDOW_SIGMA * sigma0
    hi = mu0 + FIT_WINDOW_SIGMA * sigma0
    n_bins = max(1, int(np.ceil((hi - lo) / bin_width)))
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])

    try:
        popt, _ = curve_fit(
            _gaussian, centers, counts.astype(np.float64),
            p0=(float(counts.max()), mu0, sigma0),
            maxfev=FIT_MAX_ITERATIONS,
        )
        _, mean, stddev = popt
        stddev = float(abs(stddev))
        if stddev <= 0 or not np.isfinite(mean) or not np.isfinite(stddev):
            raise RuntimeError("degenerate fit")
        return Thresholds(float(mean), stddev, n_sigma)
    except RuntimeError:
        mu, sigma = _sigma_clipped_moments(values)
        log.warning("gaussian fit failed; using sigma-clipped moments "
                    "(mean=%.3f stddev=%.3f)", mu, sigma)
        return Thresholds(mu, sigma, n_sigma, degenerate=True)


_NEIGHBORS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1),
                (0, 1), (1, -1), (1, 0), (1, 1)]
_NEIGHBORS_4 = [(-1, 0), (0, -1), (0, 1), (1, 0)]


def count_frame(frame: np.ndarray, thresholds: Thresholds,
                dark: np.ndarray | None = None,
                connectivity: int = 8) -> np.ndarray:
    """Extract electron events from one assembled frame.

    Returns sorted u32 row-major pixel indices. Boundary pixels compare
    only against existing neighbors.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    v = np.asarray(frame, dtype=np.float64)
    if dark is not None:
        v = v - dark
    rows, cols = v.shape
    cand = (v > thresholds.background) & (v < thresholds.xray)
    cand_idx = np.flatnonzero(cand)
    if cand_idx.size == 0:
        return np.empty(0, dtype=np.uint32)

    offsets = _NEIGHBORS_8 if connectivity == 8 else _NEIGHBORS_4
    # Candidates are sparse (a few per frame at realistic thresholds), so
    # events are found by walking each candidate's equal-valued connected
    # component: the component yields one event, at its lowest row-major
    # index, iff no cell in it has a strictly greater neighbor anywhere.
    # An equal-valued neighbor of a candidate is itself a candidate (same
    # thresholds), so component expansion stays inside the candidate set.
    events = []
    visited: set[int] = set()
    for p in cand_idx:
        p = int(p)
        if p in visited:
            continue
        value = v.flat[p]
        stack = [p]
        seen = {p}
        is_max = True
        best = p
        while stack:
            q = stack.pop()
            r, c = divmod(q, cols)
            if q < best:
                best = q
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if not (0 <= rr < rows and 0 <= cc < cols):
                    continue
                nv = v[rr, cc]
                if nv > value:
                    is_max = False
                elif nv == value:
                    nq = rr * cols + cc
                    if cand[rr, cc] and nq not in seen:
                        seen.add(nq)
                        stack.append(nq)
        visited.update(seen)
        if is_max:
            events.append(best)

    return np.asarray(sorted(events), dtype=np.uint32)


def count_frames(frames: dict[int, np.ndarray], thresholds: Thresholds,
                 dark: np.ndarray | None = None,
                 connectivity: int = 8) -> list[EventList]:
    """Count a batch of frames in ascending frame order (reference path)."""
    return [EventList(fn, count_frame(frames[fn], thresholds, dark,
                                      connectivity))
            for fn in sorted(frames)]


def sample_frame_numbers(n_frames: int,
                         sample_count: int = DEFAULT_SAMPLE_COUNT) -> list[int]:
    """Uniformly spaced frame numbers used for threshold estimation."""
    if n_frames <= 0:
        return []
    count = min(sample_count, n_frames)
    return sorted({int(i * n_frames / count) for i in range(count)})


def count_scan_oracle(frames: dict[int, np.ndarray],
                      thresholds: Thresholds,
                      dark: np.ndarray | None = None,
                      connectivity: int = 8) -> list[EventList]:
    """Single-threaded, frame-ordered reference reduction over a full scan.

    `frames` must hold every frame of the scan keyed by frame number.
    """
    return count_frames(frames, thresholds, dark, connectivity)
