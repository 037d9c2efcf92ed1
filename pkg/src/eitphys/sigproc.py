"""Signal preprocessing, alignment and evaluation metrics.

All functions are pure: they never modify their inputs.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba as nb
import numpy as np
from scipy import signal as sps

from eitphys.errors import AlignmentError, DimensionError, UnsupportedRateError, UsageError

TARGET_RATE = 10.0
STANDARDIZE_EPS = 1e-8
MIN_ALIGN_CORRELATION = 0.2

UNITS = {
    "V": "ml",
    "F": "l/s",
    "p_aw": "cmH2O",
    "p_aw_monitor": "cmH2O",
    "p_es": "cmH2O",
    "p_tp": "cmH2O",
    "p_ab": "mmHg",
    "eit_sum": "a.u.",
}


@dataclass(frozen=True)
class Channel:
    id: str
    samples: np.ndarray
    rate: float
    unit: str = ""

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise UsageError(f"channel {self.id}: rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise UsageError(f"channel {self.id}: samples contain non-finite values")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


# ---------------------------------------------------------------- resampling


def antialias_taps(rate: float, cutoff: float = TARGET_RATE / 2) -> np.ndarray:
    """Hamming-windowed sinc low-pass spanning 0.4 s, normalized to unit DC gain."""
    half = max(1, int(round(0.2 * rate)))
    taps = sps.firwin(2 * half + 1, cutoff, fs=rate)
    return taps / taps.sum()


def resample_array(x: np.ndarray, rate: float, target: float = TARGET_RATE) -> np.ndarray:
    """Zero-phase low-pass at target/2, then linear interpolation at multiples of 1/target.

    Works along axis 0; ``rate == target`` returns a copy.
    """
    x = np.asarray(x, dtype=np.float64)
    if rate < target:
        raise UnsupportedRateError(f"cannot resample {rate} Hz to {target} Hz (upsampling unsupported)")
    if rate == target:
        return x.copy()
    taps = antialias_taps(rate, target / 2)
    half = len(taps) // 2
    n = x.shape[0]
    if n > half:
        # odd reflection keeps constants and linear trends intact at the edges
        head = 2 * x[:1] - x[half:0:-1]
        tail = 2 * x[-1:] - x[-2 : -half - 2 : -1]
        padded = np.concatenate([head, x, tail])
        filtered = sps.convolve(padded, taps.reshape((-1,) + (1,) * (x.ndim - 1)), mode="valid")
    else:
        filtered = x
    n_out = int(math.floor((n - 1) * target / rate + 1e-9)) + 1
    t_src = np.arange(n) / rate
    t_out = np.arange(n_out) / target
    if x.ndim == 1:
        return np.interp(t_out, t_src, filtered)
    pos = t_out * rate
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    return filtered[lo] * (1 - w) + filtered[hi] * w


def resample_10hz(ch: Channel) -> Channel:
    return Channel(ch.id, resample_array(ch.samples, ch.rate, TARGET_RATE), TARGET_RATE, ch.unit)


# ------------------------------------------------------------ standardization


@dataclass(frozen=True)
class Standardized:
    y: np.ndarray
    mean: float
    sd: float
    degenerate: bool

    def __iter__(self):
        return iter((self.y, self.mean, self.sd))


def standardize(x, eps: float = STANDARDIZE_EPS) -> Standardized:
    """Zero mean, unit population SD over all elements of ``x``.

    When SD <= eps the input is only centered and ``sd`` is reported as eps.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise UsageError("standardize: empty input")
    if x.size < 2:
        raise UsageError("standardize: need at least two samples")
    work = x.astype(np.float64, copy=False)
    mean = float(work.mean())
    sd = float(work.std())
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    if sd <= eps:
        return Standardized((work - mean).astype(dtype), mean, eps, True)
    return Standardized(((work - mean) / sd).astype(dtype), mean, sd, False)


# ----------------------------------------------------------------- alignment


def lagged_overlap(a: np.ndarray, b: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pairs a[t] with b[t + lag] over the samples where both exist."""
    n = min(len(a), len(b))
    if lag >= 0:
        return a[: n - lag], b[lag:n]
    return a[-lag:n], b[: n + lag]


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return float("nan")
    return float(xc @ yc) / denom


def cross_correlation(a, b, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pearson correlation of a[t] and b[t + lag] for lag in [-max_lag, max_lag].

    Lags whose overlap has fewer than two samples or zero variance give NaN.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lags = np.arange(-max_lag, max_lag + 1)
    corr = np.full(len(lags), np.nan)
    for k, lag in enumerate(lags):
        x, y = lagged_overlap(a, b, int(lag))
        if len(x) >= 2:
            corr[k] = _pearson(x, y)
    return lags, corr


def _pick_lag(lags: np.ndarray, values: np.ndarray, tol: float = 1e-9) -> int:
    best = np.nanmax(values)
    candidates = lags[values >= best - tol]
    return int(sorted(candidates, key=lambda l: (abs(l), -l))[0])


def estimate_lag(a, b, max_lag: int) -> int:
    """Lag (in samples) by which ``b`` trails ``a``: b[t] ~ a[t - lag].

    Maximizes normalized cross-correlation on the overlap; equal maxima resolve
    toward the smallest |lag|.
    """
    if max_lag < 0:
        raise UsageError("max_lag must be non-negative")
    if max_lag >= min(len(a), len(b)):
        raise UsageError(f"max_lag {max_lag} must be below the shorter length {min(len(a), len(b))}")
    lags, corr = cross_correlation(a, b, max_lag)
    if np.all(np.isnan(corr)):
        raise AlignmentError("no lag had an overlap of at least two samples with nonzero variance")
    return _pick_lag(lags, corr)


def peak_correlation(a, b, max_lag: int) -> float:
    _, corr = cross_correlation(a, b, max_lag)
    return float(np.nanmax(corr)) if not np.all(np.isnan(corr)) else float("nan")


def align_records(rec, max_lag: int = 40, min_correlation: float = MIN_ALIGN_CORRELATION):
    """Undo device lags of a record.

    The EIT frame sum is aligned to spirometry volume; the monitor channels are
    aligned through their copy of airway pressure. All channels are then trimmed to
    the window covered by every aligned device. Devices whose best correlation stays
    below ``min_correlation`` are flagged in ``meta["unalignable"]`` and their
    channels dropped.
    """
    devices = rec.device_channels()
    n = rec.n_samples
    estimated: dict[str, int] = {}
    peaks: dict[str, float] = {}
    unalignable: list[str] = []
    pairs = {"eit": (rec.channels["V"].samples, rec.eit_sum()), "monitor": None}
    if "p_aw_monitor" in rec.channels:
        pairs["monitor"] = (rec.channels["p_aw"].samples, rec.channels["p_aw_monitor"].samples)
    for dev, pair in pairs.items():
        if pair is None:
            continue
        peak = peak_correlation(pair[0], pair[1], max_lag)
        peaks[dev] = peak
        if not np.isfinite(peak) or peak < min_correlation:
            unalignable.append(dev)
            continue
        estimated[dev] = estimate_lag(pair[0], pair[1], max_lag)

    lo = max([0] + [-lag for lag in estimated.values()])
    hi = min([n] + [n - lag for lag in estimated.values()])
    channels = {}
    for cid, ch in rec.channels.items():
        dev = devices.get(cid, "ventilator")
        if dev in unalignable:
            continue
        lag = estimated.get(dev, 0)
        channels[cid] = dataclasses.replace(ch, samples=ch.samples[lo + lag : hi + lag].copy())
    eit = rec.eit
    if "eit" in unalignable:
        eit = None
    elif eit is not None:
        lag = estimated.get("eit", 0)
        eit = eit[lo + lag : hi + lag].copy()
    injected = rec.injected_lags or {}
    meta = dict(rec.meta)
    meta.update(
        aligned=True,
        estimated_lags=estimated,
        residual_lags={d: int(injected.get(d, 0)) - int(lag) for d, lag in estimated.items()},
        alignment_peaks=peaks,
        unalignable=unalignable,
        trimmed=[int(lo), int(n - hi)],
    )
    return dataclasses.replace(rec, channels=channels, eit=eit, injected_lags={}, meta=meta)


# -------------------------------------------------------------------- metrics


def _as_pair(pred, tgt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    tgt = np.asarray(tgt, dtype=np.float64).ravel()
    if pred.shape != tgt.shape:
        raise UsageError(f"prediction length {pred.size} differs from target length {tgt.size}")
    return pred, tgt


def rmse(pred, tgt) -> float:
    pred, tgt = _as_pair(pred, tgt)
    return float(np.sqrt(np.mean((pred - tgt) ** 2)))


def best_shift(pred, tgt, max_lag: int) -> int:
    """Local maximum of the pred/target cross-correlation closest to zero lag.

    Falls back to the global maximum when the correlation has no local maximum.
    """
    pred, tgt = _as_pair(pred, tgt)
    if max_lag == 0:
        return 0
    lags, corr = cross_correlation(pred, tgt, max_lag)
    c = np.where(np.isnan(corr), -np.inf, corr)
    is_peak = np.zeros(len(c), bool)
    for k in range(len(c)):
        left = c[k - 1] if k > 0 else -np.inf
        right = c[k + 1] if k + 1 < len(c) else -np.inf
        is_peak[k] = np.isfinite(c[k]) and c[k] >= left and c[k] >= right
    if not is_peak.any():
        return 0
    return int(sorted(lags[is_peak], key=lambda l: (abs(l), -l))[0])


def shifted_rmse(pred, tgt, max_lag: int = 10) -> float:
    pred, tgt = _as_pair(pred, tgt)
    if max_lag >= len(pred) / 2:
        raise UsageError(f"max_lag {max_lag} must be below half the length {len(pred)}")
    lag = best_shift(pred, tgt, max_lag)
    x, y = lagged_overlap(pred, tgt, lag)
    return float(np.sqrt(np.mean((x - y) ** 2)))


@nb.njit(cache=True)
def _dtw(a, b):
    n, m = len(a), len(b)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = abs(a[i - 1] - b[j - 1]) + best
    return acc[n, m]


def dtw(pred, tgt) -> float:
    """Accumulated absolute-difference cost of the optimal monotone warping path."""
    a = np.asarray(pred, dtype=np.float64).ravel()
    b = np.asarray(tgt, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise UsageError("dtw needs non-empty sequences")
    return float(_dtw(a, b))


# -------------------------------------------------------------- visual rating


class Rating(str, enum.Enum):
    PLUS = "+"
    CIRCLE = "o"
    MINUS = "-"


@dataclass(frozen=True)
class RatingThresholds:
    freq_tolerance: float = 0.1
    amplitude_band: tuple[float, float] = (0.7, 1.4)
    plus_correlation: float = 0.8
    circle_correlation: float = 0.6
    band_hz: tuple[float, float] = (0.05, 3.0)
    max_lag: int = 10


def dominant_frequency(x, rate: float = TARGET_RATE, band=(0.05, 3.0), nfft: int = 4096) -> float:
    """Frequency of the largest Hann-windowed periodogram bin inside ``band``."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=max(nfft, len(x))))
    freqs = np.fft.rfftfreq(max(nfft, len(x)), d=1.0 / rate)
    inside = (freqs >= band[0]) & (freqs <= band[1])
    return float(freqs[inside][np.argmax(spec[inside])])


def visual_rating(pred, tgt, rate: float = TARGET_RATE, thresholds: RatingThresholds = RatingThresholds()) -> Rating:
    """Automated stand-in for the +/o/- visual categories.

    + : dominant frequency within tolerance, SD ratio in the amplitude band and
        high shifted correlation.
    o : frequency within tolerance and moderate correlation, any amplitude.
    - : everything else, including a flat prediction.
    """
    pred, tgt = _as_pair(pred, tgt)
    sd_p, sd_t = pred.std(), tgt.std()
    if sd_p <= STANDARDIZE_EPS or sd_t <= STANDARDIZE_EPS:
        return Rating.MINUS
    f_p = dominant_frequency(pred, rate, thresholds.band_hz)
    f_t = dominant_frequency(tgt, rate, thresholds.band_hz)
    freq_ok = abs(f_p - f_t) / f_t <= thresholds.freq_tolerance
    _, corr = cross_correlation(pred, tgt, thresholds.max_lag)
    rho = float(np.nanmax(corr))
    ratio = sd_p / sd_t
    lo, hi = thresholds.amplitude_band
    amp_ok = lo - 1e-9 <= ratio <= hi + 1e-9
    if freq_ok and amp_ok and rho >= thresholds.plus_correlation:
        return Rating.PLUS
    if freq_ok and rho >= thresholds.circle_correlation:
        return Rating.CIRCLE
    return Rating.MINUS


# -------------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    task: str
    split: str
    variant: str = ""
    n_segments: int = 0
    target_mean: float = float("nan")
    target_sd: float = float("nan")
    rmse: float = float("nan")
    shifted_rmse: float = float("nan")
    dtw: float = float("nan")
    plus: int = 0
    circle: int = 0
    minus: int = 0
    unit: str = ""
    ratings: list[str] = field(default_factory=list, repr=False)

    @property
    def plus_rate(self) -> float:
        return self.plus / self.n_segments if self.n_segments else float("nan")

    def row(self) -> dict:
        fmt = lambda v: "" if v != v else f"{v:.6g}"  # noqa: E731 - NaN prints empty
        return {
            "task": self.task,
            "variant": self.variant,
            "split": self.split,
            "n_segments": self.n_segments,
            "unit": self.unit,
            "target_mean": fmt(self.target_mean),
            "target_sd": fmt(self.target_sd),
            "rmse": fmt(self.rmse),
            "shifted_rmse": fmt(self.shifted_rmse),
            "dtw": fmt(self.dtw),
            "plus": self.plus,
            "circle": self.circle,
            "minus": self.minus,
        }

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("ratings")
        return {k: (None if isinstance(v, float) and v != v else v) for k, v in d.items()}


CSV_FIELDS = ["task", "variant", "split", "n_segments", "unit", "target_mean", "target_sd", "rmse",
              "shifted_rmse", "dtw", "plus", "circle", "minus"]


def write_metrics_csv(reports: Iterable[MetricsReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())


def write_summary_json(reports: Sequence[MetricsReport], path, extra: dict | None = None) -> None:
    payload = {"reports": [r.to_json() for r in reports], **(extra or {})}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def plot_segment_svg(pred, tgt, path, title: str = "", rate: float = TARGET_RATE, unit: str = "") -> None:
    """Target and prediction over one segment, one panel, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(len(tgt)) / rate
    fig, ax = plt.subplots(figsize=(6, 2.4))
    ax.plot(t, tgt, color="black", lw=1.2, label="target")
    ax.plot(t, pred, color="tab:red", lw=1.2, label="prediction")
    ax.set_xlabel("time [s]")
    if unit:
        ax.set_ylabel(unit)
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def check_equal_length(*arrays) -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise DimensionError(f"sequences differ in length: {sorted(lengths)}")
