"""Train the hybrid model on a synthetic world whose clicks follow a linear rule.

    python demos/02_synthetic_training.py
"""

from purs.data import Catalog, make_synthetic_world
from purs.engine import TrainConfig, VariantId, score_events, train, utility
from purs.metrics import auc

# 20 users, 50 items, 30 impressions each; a click happens when a fixed linear
# score of the user's and item's 4-d features is positive.
events, user_feats, item_feats = make_synthetic_world(20, 50, 30, seed=0)
catalog = Catalog.build(events, user_feats, item_feats)
print(f"{len(events)} events, click rate {sum(e.label for e in events) / len(events):.2f}")

# The hybrid utility on hand-picked inputs.
print("FULL  r=0.5 unexp=1 factor=1:", round(float(utility(0.5, 1.0, 1.0).data), 5))
print("V1    r=0.5 unexp=0 factor=1:", float(utility(0.5, 0.0, 1.0, VariantId.V1_GAUSSIAN).data))

# Glorot-initialised autoencoders let the small feature vectors spread out in
# the embedding space; the per-epoch log is computed on each user's latest 10%.
cfg = TrainConfig(epochs=5, ae_init="glorot")
model, log = train(events, cfg, catalog)
for rec in log:
    loss = "-" if rec.loss is None else f"{rec.loss:.4f}"
    print(f"epoch {rec.epoch}: train loss {loss}  val auc {rec.auc:.3f}  val unexp {rec.mean_unexp:.3f}")

# Scoring each event from the history strictly before it avoids the leak of a
# clicked item sitting at its own cluster centroid.
scores = score_events(model, events)
print("train AUC:", round(auc(scores, [e.label for e in events]), 3))

u0 = catalog.users.index["u0"]
clusters = model.user_clusters(u0)
print("u0 has", len(clusters), "interest clusters of sizes", [c.size for c in clusters])
