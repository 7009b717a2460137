# Look inside the hybrid attention of an untrained mini model.
# Run with:  python demos/02_attention_maps.py

import numpy as np

from hamreid.attention import AttentionConfig, Ordering
from hamreid.backbone import fmr_fuse
from hamreid.model import Model, ModelConfig
from hamreid.tensor import make_rng

x = make_rng(0).uniform(size=(1, 3, 48, 32))

# The default wiring puts a spatial map on each stage before concatenation and
# one channel map on the fused result.
model = Model(ModelConfig(num_ids=4), seed=0)
res = model.forward(x)
for site, m in res.attention.sam.items():
    print(f"spatial map at {site}: shape {m.shape[1:]}, range [{m.data.min():.3f}, {m.data.max():.3f}]")
for site, m in res.attention.cam.items():
    print(f"channel map at {site}: {m.shape[-1]} weights, mean {m.data.mean():.3f}")

# Attention can only shrink activations. Each map is a sigmoid, so it lies in (0, 1).
plain = fmr_fuse(res.stages, model.cfg.fusion).data
print("fused map never grows:", bool(np.all(np.abs(res.fused.data) <= np.abs(plain))))

# With every attention weight at zero both maps are exactly 0.5, so the fused
# map is a quarter of the unattended one, whatever the ordering.
for ordering in Ordering:
    m = Model(ModelConfig(attention=AttentionConfig(ordering), num_ids=4), seed=0)
    for name, p in m.params.items():
        if name.startswith("attn."):
            p[...] = 0.0
    r = m.forward(x)
    ratio = np.abs(r.fused.data).sum() / np.abs(fmr_fuse(r.stages, m.cfg.fusion).data).sum()
    print(f"{ordering.label:<7} zero-weight ratio: {ratio:.4f}")
