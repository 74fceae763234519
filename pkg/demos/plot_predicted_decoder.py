"""
A decoder whose weights come from the query
===========================================

"""

# a meta model at the desk widths: per-point encoder 64-128-1024, a 1024-wide
# embedding, and a six-layer decoder of width 64
import numpy as np
from metadeform import DESK_CONFIG, count_params, new_model
from metadeform.data import deform_shape

model = new_model("meta", DESK_CONFIG, seed=0)

# every decoder layer needs K_in*K_out weights plus K_out scales and K_out biases
per_layer, total = count_params(DESK_CONFIG.decoder_widths())
print(per_layer, total)

# encode a posed figure; the hypernetwork turns the embedding into a decoder
pose = np.array([0.1, 0.2, 0.5, -0.3, 0.1, 0.0, 0.2, 0.05])
query = deform_shape(pose, DESK_CONFIG.n_template).shape
E = model.encode(query.points)
theta = model.predict_params(E)
for W, s, b in theta.layers:
    print(W.shape, s.shape, b.shape)

# an untrained model returns the template unchanged, whatever the query
moved = model.deform(E)
print(np.abs(moved - model.template_points()).max())
