"""
Other tool paths and a hidden grasp point
=========================================

Runs each trajectory for one second, then repeats the lift with the
observations around the tool removed and compares against simply holding
the last observed position of the hidden points.
"""

import numpy as np

from pbdreg.harness import Scenario, last_seen_hold, run_scenario

for kind in ("lift", "cube", "butterfly", "sine_wave"):
    scn = Scenario().override({"trajectory.kind": kind, "trajectory.amplitude": 0.015,
                               "trajectory.period": 1.0, "trajectory.duration": 1.0})
    rec = run_scenario(scn)
    w, wo = rec.mean_error("with"), rec.mean_error("without")
    print(f"{kind:>10}: with {w * 1e3:.3f} mm, without {wo * 1e3:.3f} mm")

scn = Scenario().override({"observation.occlusion_radius": 0.01, "observation.drop_occluded": True})
rec = run_scenario(scn, baseline=False)
hidden = np.isnan(rec.observed[1:, :, 0])
truth = rec.oracle_surfaces[1:]
reg = np.linalg.norm(rec.surfaces["with"][1:] - truth, axis=2)[hidden].mean()
hold = np.linalg.norm(last_seen_hold(rec)[1:] - truth, axis=2)[hidden].mean()
print(f"hidden region ({hidden.any(axis=0).sum()} particles): registered {reg * 1e3:.3f} mm, "
      f"last-seen hold {hold * 1e3:.3f} mm")
