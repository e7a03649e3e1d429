"""Tongue activity as a speaker cue, on one synthetic session.

Generates a session, computes the ETA trace, diarizes with energy VAD alone
and with VAD+ETA, and prints how each does against the reference.

    python demos/eta_diarization.py [seed]
"""
import sys

import numpy as np

from utipipe.acoustic_features import frame_log_energy
from utipipe.diarizer import postprocess, vad_diarize, vad_eta_diarize
from utipipe.eta import compute_eta, eta_activity, eta_frame_feature, normalize_unity
from utipipe.metrics import der, detection_prf
from utipipe.synthgen import SynthConfig, generate_session

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
synth = generate_session(SynthConfig(seed=seed))
session = synth.session
ref = session.reference
print(f"session: {session.audio.duration_s:.2f} s audio, "
      f"{session.ultrasound.frames.shape[0]} ultrasound frames")
print("reference:", " ".join(f"{s.label}[{s.start_s:.2f}-{s.end_s:.2f}]" for s in ref
                             if s.label != "silence"))

# raw ETA is much larger while the child talks
raw = compute_eta(session.ultrasound)
at = np.array([ref.label_at(t, "silence") for t in raw.centers])
for who in ("child", "therapist", "silence"):
    if np.any(at == who):
        print(f"  mean raw ETA during {who:9s}: {raw.values[at == who].mean():.2e}")

eta = normalize_unity(raw)
active = eta_activity(eta).filter({"active"})
print("tongue active:", ", ".join(f"{s.start_s:.2f}-{s.end_s:.2f}" for s in active))

energy = frame_log_energy(session.audio)
dur = session.audio.duration_s
systems = {
    "VAD": vad_diarize(energy, total_duration_s=dur),
    "VAD+ETA": vad_eta_diarize(energy, eta_frame_feature(eta, 0.01, energy.size),
                               total_duration_s=dur),
}
for name, hyp in systems.items():
    hyp = postprocess(hyp)
    s = detection_prf(ref, hyp, "child")
    d = der(ref, hyp)
    print(f"{name:8s} child P/R/F1 {s.precision:.3f}/{s.recall:.3f}/{s.f1:.3f}  "
          f"DER {d.der:5.1f}% (conf {d.confusion:.1f}, miss {d.missed:.1f}, fa {d.false_alarm:.1f})")
