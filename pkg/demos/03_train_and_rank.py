# Train the mini model on a procedural dataset and rank a held-out gallery.
# Takes a couple of minutes on one core. Run with:  python demos/03_train_and_rank.py

import tempfile

import numpy as np

from hamreid.data import load_images, relabel, synth_generate
from hamreid.metrics import EmbeddingSet, evaluate
from hamreid.model import Model, ModelConfig
from hamreid.training import TrainConfig, normalize, train_loop

root = tempfile.mkdtemp()
# closed_set keeps every identity in training and ranks unseen images of them
m = synth_generate(8, 8, 2, (48, 32), seed=0, out_dir=root, closed_set=True)
train = m.split("train")
print(f"{len(train)} training images of {len({r.pid for r in train})} identities in {root}")

images = load_images(train, (48, 32))
labels, _ = relabel([r.pid for r in train])
model = Model(ModelConfig(num_ids=len(set(labels))), seed=0)


def ranked():
    sets = []
    for split in ("query", "gallery"):
        recs = m.split(split)
        desc = model.embed(normalize(load_images(recs, (48, 32))))
        sets.append(EmbeddingSet(desc, [r.pid for r in recs], [r.camid for r in recs], split))
    return evaluate(*sets, max_rank=5)


print("before training:", ranked().summary())
history = train_loop(model, images, labels, TrainConfig(epochs=60, P=8, K=4), seed=0)
for log in history[::10] + [history[-1]]:
    print(f"epoch {log.epoch:3d}  lr {log.lr:.5f}  id {log.id_loss:.3f}  triplet {log.tp_loss:.3f}")
print("after training: ", ranked().summary())

# The descriptor concatenates one unit vector per branch, so its norm is sqrt(21).
d = model.embed(normalize(images[:2]))
print("descriptor length", d.shape[1], "norm", np.linalg.norm(d, axis=1).round(4))
