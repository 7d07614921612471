"""Train a small second stage and compare window lengths.

A reduced scene (12.8 m grid, 8 channels) keeps this under a minute.
The model is trained with a random window per sample, then the same weights
are evaluated with n = 1..5 frames in the memory bank.  At this size the gap
between n=1 and n=5 is noisy; the full-size run lives behind
``trajfuse ablate-frames --config configs/reference.ini``.
Run: python demos/03_memory_window.py
"""
import logging

from trajfuse.aggregation import AggregationConfig
from trajfuse.harness import SceneConfig
from trajfuse.model import ModelConfig, SecondStage
from trajfuse.training import GeneratedCorpus, ablate_frames, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

scene = SceneConfig(x_max=12.8, y_min=-6.4, y_max=6.4, C_g=8, C_l=8, min_objects=2, max_objects=3)
model = SecondStage(scene.grid, ModelConfig(agg=AggregationConfig(C_g=8, C_l=8, lga_heads=2, mstr_heads=2)))
train(model, GeneratedCorpus(scene, range(30)), epochs=4, lr=1e-3)

for n, res in ablate_frames(model, GeneratedCorpus(scene, range(100000, 100010))):
    per_cls = " ".join(f"{v:5.1%}" for v in res["ap"].values())
    print(f"n={n}  mAP {res['mAP']:6.1%}   per class {per_cls}")
