"""
Undoing an unknown pitch and yaw
================================

"""

import numpy as np
from metadeform import InferenceConfig, ModelConfig, RotationPair, TrainConfig, train
from metadeform.data import generate_dataset
from metadeform.geometry import normalize_centroid
from metadeform.pipeline import new_model, optimize_rotation

data = generate_dataset(8, 128, seed=0)
config = ModelConfig(n_template=128, encoder_widths=(16, 32, 64), refine_widths=(64, 64),
                     decoder_hidden=16, decoder_layers=4)
model = train(data, TrainConfig(phase1_epochs=500, phase2_epochs=0, phase1_lr=3e-5, batch_size=8),
              new_model("meta", config)).model

# tilt a training figure by the inverse of grid pair (60, 15)
cfg = InferenceConfig()
rot = RotationPair(cfg.alphas()[60], cfg.betas()[15])
query, centroid = normalize_centroid(data[0].shape)
tilted = query.points @ rot.matrix()

# every pitch/yaw pair on the 100 x 25 grid is tried with the raw encoder embedding
found = optimize_rotation(model, tilted, cfg)
print("candidates", found.n_candidates)
print("found", found.index, np.degrees([found.alpha, found.beta]))

# the loss surface, one row per pitch
best_row = found.losses[found.index[0]]
print(np.round(best_row[:8], 3))
