"""Track a synthetic scene and look at the reference trajectory and proposals.

Each frame the tracker hands the second stage two things per object: the one
detection Hungarian matching picked (the reference trajectory) and up to five
high-overlap detections (candidate proposals).  Occluded frames show up as
gaps in the reference; clutter spawns short tracks that idle until
retired.  Run: python demos/02_tracking.py
"""
from trajfuse.harness import SceneConfig, generate_frame, random_scenario
from trajfuse.tracker import Tracker, TrackerConfig

scene = SceneConfig(frames=10)
spec = random_scenario(scene, seed=3)
print(f"{len(spec.objects)} objects, occlusions:", [o.occlusions for o in spec.objects])

trk = Tracker(TrackerConfig(), spec.grid)
for t in range(spec.frames):
    rec, truth = generate_frame(spec, t)
    matches = trk.step(t, rec.dets, rec.timestamp)
    print(f"frame {t}: {len(rec.dets)} dets, {len(matches)} matched, {len(trk.tracks)} live tracks")

snap = trk.snapshot(spec.frames - 1)
print()
print("track  frames-with-reference  proposals per frame")
for row in snap.rows:
    refs = "".join("x" if f in row.refs else "." for f in range(snap.frame_id - 4, snap.frame_id + 1))
    props = [len(row.cands.get(f, [])) for f in range(snap.frame_id - 4, snap.frame_id + 1)]
    print(f"{row.track_id:5d}  {refs:>21}  {props}")
