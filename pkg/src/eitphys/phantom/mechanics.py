"""Single-compartment ventilation, esophageal and arterial waveforms at 100 Hz."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eitphys.phantom.params import PatientParams

SIM_RATE = 100.0
# Pressures are snapped to this dyadic grid so p_aw - p_es is exact in float32.
PRESSURE_QUANTUM = 2.0**-16
BREATH_JITTER = 0.08
BEAT_JITTER = 0.03
CARDIAC_RIPPLE = 0.5  # cmH2O in p_es
PULSE_PRESSURE_VARIATION = 0.08
V_REF = 500.0  # ml


def quantize(p: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(p, dtype=np.float64) / PRESSURE_QUANTUM) * PRESSURE_QUANTUM


@dataclass(frozen=True)
class Breath:
    start: int  # sample indices at SIM_RATE
    end_insp: int
    end: int
    mode: str


@dataclass(frozen=True)
class PeristalsisEvent:
    onset: float  # s
    duration: float  # s
    amplitude: float  # cmH2O


@dataclass
class MechanicsTrace:
    """Ground-truth signals at SIM_RATE, before resampling or lag injection."""

    V: np.ndarray
    F: np.ndarray
    p_aw: np.ndarray
    p_es: np.ndarray
    p_tp: np.ndarray
    p_ab: np.ndarray
    beat_times: np.ndarray
    breaths: list[Breath] = field(default_factory=list)
    peristalsis: list[PeristalsisEvent] = field(default_factory=list)
    rate: float = SIM_RATE

    @property
    def n(self) -> int:
        return len(self.V)


def mode_at(schedule, t: float) -> str:
    cycle = sum(d for _, d in schedule)
    t = t % cycle
    for mode, duration in schedule:
        if t < duration:
            return mode
        t -= duration
    return schedule[-1][0]


def breath_schedule(params: PatientParams, n: int, rng: np.random.Generator) -> list[Breath]:
    """Back-to-back breaths with +-8% period jitter; inspiration takes ie/(1+ie) of each."""
    breaths = []
    period = 60.0 / params.resp_rate
    frac = params.ie_ratio / (1.0 + params.ie_ratio)
    start = 0
    while start < n:
        length = max(4, int(round(period * (1.0 + rng.uniform(-BREATH_JITTER, BREATH_JITTER)) * SIM_RATE)))
        insp = max(1, int(round(length * frac)))
        mode = mode_at(params.mode_schedule, start / SIM_RATE)
        breaths.append(Breath(start, start + insp, start + length, mode))
        start += length
    return breaths


def integrate(params: PatientParams, breaths: list[Breath], n: int, v0: float = 0.0):
    """Explicit Euler: V[k+1] = V[k] + dt * F[k]; returns V [ml], F [l/s], p_aw [cmH2O]."""
    dt = 1.0 / SIM_RATE
    R, C, peep = params.resistance, params.compliance, params.peep
    V = np.empty(n)
    F = np.empty(n)
    P = np.empty(n)
    v = v0
    for b in breaths:
        if b.start >= n:
            break
        t_insp = (b.end_insp - b.start) * dt
        vc_flow = max(params.tidal_volume - v, 0.0) / (t_insp * 1000.0) if t_insp > 0 else 0.0
        for k in range(b.start, min(b.end, n)):
            if k < b.end_insp and b.mode == "PC":
                p = peep + params.driving_pressure
                f = (p - v / C - peep) / R
            elif k < b.end_insp:
                f = min(vc_flow, max(params.tidal_volume - v, 0.0) / (dt * 1000.0))
                p = peep + v / C + f * R
            else:
                p = peep
                f = -v / C / R
            V[k] = v
            F[k] = f
            P[k] = p
            v = v + dt * 1000.0 * f
    return V, F, P


def beat_times(params: PatientParams, duration: float, rng: np.random.Generator) -> np.ndarray:
    rr = 60.0 / params.heart_rate
    t = -rng.uniform(0.0, rr) - 1.0
    times = []
    while t < duration + 2.0:
        times.append(t)
        t += rr * (1.0 + rng.uniform(-BEAT_JITTER, BEAT_JITTER))
    return np.asarray(times)


def cardiac_phase(t: np.ndarray, beats: np.ndarray) -> np.ndarray:
    """Fractional position inside the current beat, linear between beat onsets."""
    return np.mod(np.interp(t, beats, np.arange(len(beats), dtype=np.float64)), 1.0)


def _wrapped(phi, centre):
    return np.mod(phi - centre + 0.5, 1.0) - 0.5


def beat_template(phi: np.ndarray) -> np.ndarray:
    """Systolic peak plus dicrotic wave, periodic in phase, scaled to [0, 1]."""
    raw = np.exp(-((_wrapped(phi, 0.15) / 0.07) ** 2)) + 0.35 * np.exp(-((_wrapped(phi, 0.42) / 0.06) ** 2))
    return (raw - _TEMPLATE_MIN) / (_TEMPLATE_MAX - _TEMPLATE_MIN)


def _template_range():
    phi = np.linspace(0, 1, 20001)
    raw = np.exp(-((_wrapped(phi, 0.15) / 0.07) ** 2)) + 0.35 * np.exp(-((_wrapped(phi, 0.42) / 0.06) ** 2))
    return raw.min(), raw.max()


_TEMPLATE_MIN, _TEMPLATE_MAX = _template_range()


def peristalsis_events(params: PatientParams, duration: float, rng: np.random.Generator) -> list[PeristalsisEvent]:
    count = rng.poisson(params.peristalsis_rate * duration / 60.0)
    events = [
        PeristalsisEvent(float(rng.uniform(0, duration)), float(rng.uniform(3.0, 6.0)), float(rng.uniform(2.0, 6.0)))
        for _ in range(count)
    ]
    return sorted(events, key=lambda e: e.onset)


def peristalsis_wave(t: np.ndarray, events: list[PeristalsisEvent]) -> np.ndarray:
    out = np.zeros_like(t)
    for e in events:
        inside = (t > e.onset) & (t < e.onset + e.duration)
        out[inside] += e.amplitude * np.sin(np.pi * (t[inside] - e.onset) / e.duration) ** 2
    return out


def simulate_trace(params: PatientParams, duration: float, seed: int, peristalsis: bool = True) -> MechanicsTrace:
    """All physiological channels at SIM_RATE; each random component has its own stream."""
    n = int(round(duration * SIM_RATE))
    s_breath, s_beat, s_peri = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    t = np.arange(n) / SIM_RATE
    breaths = breath_schedule(params, n, s_breath)
    V, F, p_aw = integrate(params, breaths, n)
    beats = beat_times(params, duration, s_beat)
    events = peristalsis_events(params, duration, s_peri) if peristalsis else []

    ripple = CARDIAC_RIPPLE * (beat_template(cardiac_phase(t, beats)) - 0.5)
    p_es = quantize(V / params.chest_wall_compliance + ripple + peristalsis_wave(t, events))
    p_aw = quantize(p_aw)
    p_tp = p_aw - p_es

    pulse = beat_template(cardiac_phase(t - params.arterial_lag, beats))
    swing = (params.systolic - params.diastolic) * (1.0 - PULSE_PRESSURE_VARIATION * V / V_REF)
    p_ab = params.diastolic + swing * pulse
    return MechanicsTrace(V, F, p_aw, p_es, p_tp, p_ab, beats, breaths, events)


def cardiac_basis(trace: MechanicsTrace, max_delay: int) -> np.ndarray:
    """Heart-region impedance waveform delayed by 0..max_delay samples, [max_delay+1, n]."""
    t = np.arange(trace.n) / trace.rate
    return np.stack([beat_template(cardiac_phase(t - d / trace.rate, trace.beat_times)) - 0.5
                     for d in range(max_delay + 1)])
