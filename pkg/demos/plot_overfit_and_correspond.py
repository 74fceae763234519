"""
Fitting a few posed figures, then matching two of them
======================================================

Small widths so the whole script runs in a few seconds.
"""

import numpy as np
from metadeform import InferenceConfig, ModelConfig, TrainConfig, correspond, eval_correspondence, train
from metadeform.data import generate_dataset
from metadeform.pipeline import new_model, random_baseline_error

# eight posed figures of 128 points; point i of every figure is the image of
# canonical point i, which gives exact ground truth for free
data = generate_dataset(8, 128, seed=0)

config = ModelConfig(n_template=128, encoder_widths=(16, 32, 64), refine_widths=(64, 64),
                     decoder_hidden=16, decoder_layers=4)
model = new_model("meta", config, seed=0)

# supervised loss against the known targets, whole set per step
result = train(data, TrainConfig(phase1_epochs=500, phase2_epochs=0, phase1_lr=3e-5, batch_size=8), model)
print("loss", result.epoch_losses[0], "->", result.epoch_losses[-1])

# match figure 0 to figure 1 through the shared template
cfg = InferenceConfig(iterations=50, search_rotation=False)
C = correspond(result.model, data[0].shape, data[1].shape, cfg)
metrics = eval_correspondence(C, data[1].shape.points)
print("mean error", metrics.mean_error, "exact", metrics.exact_rate)

# a random assignment for scale
print("random baseline", random_baseline_error(data[1].shape, data[1].shape.points))
