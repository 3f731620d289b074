import numpy as np
from placerec.kpconv import BatchlessNorm, LeakyReLU

rng = np.random.default_rng(0)
norm = BatchlessNorm(5, dtype=np.float64)
norm.running_mean[...] = rng.normal(size=5) * 0.3
norm.running_var[...] = rng.uniform(0.5, 2.0, 5)
norm.gamma.value[...] = rng.normal(1.0, 0.2, 5)
norm.beta.value[...] = rng.normal(0.0, 0.2, 5)
x = rng.normal(size=(7, 5))
w = rng.normal(size=(7, 5))

def loss():
    return float(np.sum(norm.forward(x) * w))

norm.zero_grad()
y = norm.forward(x)
norm.backward(w)
h = 1e-6
for pname, p in norm.own_params():
    flat = p.value.reshape(-1)
    g = p.grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h; lp = loss()
        flat[i] = o - h; lm = loss()
        flat[i] = o
        num = (lp - lm) / (2 * h)
        rel = abs(g[i] - num) / max(1e-6, abs(g[i]) + abs(num))
        worst = max(worst, rel)
    print(pname, "worst rel", worst)

# Now norm + leaky stacked, looking for kink sensitivity
act = LeakyReLU(0.1)
def loss2():
    return float(np.sum(act.forward(norm.forward(x)) * w))
norm.zero_grad()
d = act.backward.__self__ and None
y = act.forward(norm.forward(x))
dy = act.backward(w)
norm.backward(dy)
pre = norm.forward(x)
print("min |preact|:", np.abs(pre).min())
for pname, p in norm.own_params():
    flat = p.value.reshape(-1)
    g = p.grad.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h; lp = loss2()
        flat[i] = o - h; lm = loss2()
        flat[i] = o
        num = (lp - lm) / (2 * h)
        rel = abs(g[i] - num) / max(1e-6, abs(g[i]) + abs(num))
        worst = max(worst, rel)
    print(pname, "worst rel", worst)
