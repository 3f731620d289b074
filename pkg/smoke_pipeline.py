import numpy as np
import time
from placerec.geometry import RgbPointCloud
from placerec.pipeline import ModelConfig, PlaceRecognitionModel
from placerec.kpconv import no_grad

rng = np.random.default_rng(3)
n = 300
pts = rng.uniform(0, 1.5, (n, 3))
cols = rng.uniform(0, 1, (n, 3))
labels = rng.integers(0, 8, n).astype(np.uint16)
cloud = RgbPointCloud(pts, cols, labels, "sc0")

cfg = ModelConfig(num_classes=8, channels=(6, 8, 10, 12, 14), stretch_dim=7,
                  vlad_clusters=5, descriptor_dim=16, dtype="float64", seed=1,
                  first_subsampling_dl=0.08)
model = PlaceRecognitionModel(cfg)

t0 = time.time()
prep = model.prepare(cloud)
print("levels:", [len(p) for p in prep.graph.points])
d = model.describe(cloud, prepared=prep)
print("norm:", np.linalg.norm(d.vector), "dim:", d.vector.shape)

# translation invariance
shift = np.array([12.3, -4.5, 6.7])
cloud2 = RgbPointCloud(pts + shift, cols, labels, "sc0")
d2 = model.describe(cloud2)
print("translation max abs diff:", np.abs(d.vector - d2.vector).max())

# permutation invariance (bitwise)
perm = rng.permutation(n)
cloud3 = RgbPointCloud(pts[perm], cols[perm], labels[perm], "sc0")
d3 = model.describe(cloud3)
print("permutation bitwise equal:", np.array_equal(d.vector, d3.vector))

# decoder forward
enc = model.encode(prep, update_stats=True)
logits = model.decode(prep, enc, update_stats=True)
print("logits:", logits.shape)

# --- gradient check of the describe path ---
def loss_fn():
    with no_grad():
        enc = model.encode(prep)
        v = model.embed(enc)
    return float(np.sum(v * w_rand))

w_rand = np.random.default_rng(9).normal(size=cfg.descriptor_dim)

model.zero_grad()
enc = model.encode(prep)
v = model.embed(enc)
d_enc = model.embedding.backward(w_rand.astype(np.float64))
model.encoder.backward(d_enc)

params = dict(model.named_params())
checked = 0
worst = 0.0
h = 1e-6
check_names = [k for k in params if np.prod(params[k].shape) > 0]
sel_rng = np.random.default_rng(11)
for name in check_names:
    p = params[name]
    flat = p.value.reshape(-1)
    gflat = p.grad.reshape(-1)
    for idx in sel_rng.choice(flat.size, size=min(3, flat.size), replace=False):
        orig = flat[idx]
        flat[idx] = orig + h
        lp = loss_fn()
        flat[idx] = orig - h
        lm = loss_fn()
        flat[idx] = orig
        num = (lp - lm) / (2 * h)
        ana = gflat[idx]
        rel = abs(ana - num) / max(1e-6, abs(ana) + abs(num))
        if rel > worst:
            worst = rel
            worst_name = name
        checked += 1
print(f"describe-path FD: {checked} entries, worst rel {worst:.3e} at {worst_name}")

# --- decoder path gradient ---
from placerec.kpconv import Module
model.zero_grad()
enc = model.encode(prep)
logits = model.decode(prep, enc)
tgt = np.random.default_rng(5).normal(size=logits.shape)

def seg_loss():
    with no_grad():
        enc = model.encode(prep)
        lg = model.decode(prep, enc)
    return float(np.sum(lg * tgt))

d_enc = model.decoder.backward(prep, tgt)
model.encoder.backward(d_enc)
worst = 0.0
checked = 0
for name in check_names:
    if name.startswith("embedding"):
        continue
    p = params[name]
    flat = p.value.reshape(-1)
    gflat = p.grad.reshape(-1)
    for idx in sel_rng.choice(flat.size, size=min(2, flat.size), replace=False):
        orig = flat[idx]
        flat[idx] = orig + h
        lp = seg_loss()
        flat[idx] = orig - h
        lm = seg_loss()
        flat[idx] = orig
        num = (lp - lm) / (2 * h)
        ana = gflat[idx]
        rel = abs(ana - num) / max(1e-6, abs(ana) + abs(num))
        if rel > worst:
            worst = rel
            worst_name = name
        checked += 1
print(f"seg-path FD: {checked} entries, worst rel {worst:.3e} at {worst_name}")
print("elapsed:", round(time.time() - t0, 2), "s")
