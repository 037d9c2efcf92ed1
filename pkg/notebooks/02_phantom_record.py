# Simulating one synthetic recording and checking what it should satisfy.
# Run with: python notebooks/02_phantom_record.py

import numpy as np

from eitphys import sigproc
from eitphys.phantom import PatientParams, simulate_record
from eitphys.phantom.mechanics import SIM_RATE, simulate_trace

params = PatientParams(patient_id=0, resistance=12.0, compliance=35.0, resp_rate=16.0)
rec = simulate_record(params, duration=60.0, seed=3, lags={"eit": 3, "monitor": -12})
print(rec.record_id, "frames:", rec.eit.shape, "channels:", sorted(rec.channels))

# Transpulmonary pressure is airway minus esophageal pressure, exactly.
resid = rec.samples("p_tp") + rec.samples("p_es") - rec.samples("p_aw_monitor")
print("max |p_tp + p_es - p_aw| =", np.abs(resid).max())

# Volume is the integral of flow (F in l/s, integrated at the 100 Hz simulation rate).
trace = simulate_trace(params, 60.0, seed=3)
integral = np.concatenate([[0.0], np.cumsum(trace.F[:-1]) * 1000.0 / SIM_RATE])
print("max |V - integral of F| (ml):", np.abs(trace.V - integral).max())

# Breath modes: pressure control gives a flat pressure plateau, volume control a flat flow.
for start, end_insp, end, mode in rec.meta["breaths"][:4]:
    print(f"breath {start:5.1f}-{end:5.1f} s, inspiration until {end_insp:5.1f} s: {mode}")

# Device clocks disagree; cross-correlation puts them back together.
aligned = sigproc.align_records(rec)
print("injected lags:", rec.injected_lags, "estimated:", aligned.meta["estimated_lags"])
print("samples after trimming:", aligned.n_samples)
