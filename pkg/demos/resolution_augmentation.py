"""How multi-resolution feature augmentation sees a video.

Run with ``python demos/resolution_augmentation.py``.
"""

import numpy as np

from c2ftcn.augment import build_distribution, pool_features, sample_window, test_time_aggregate

dist = build_distribution(w0=10)
print("windows:", [w for w, _ in dist.support()])
print("P(w=10) = %.3f, P(w=5) = %.4f" % (dist.prob(10), dist.prob(5)))

rng = np.random.default_rng(0)
draws = [sample_window(dist, rng) for _ in range(20_000)]
print("empirical P(w=10) over 20k draws: %.3f" % np.mean(np.array(draws) == 10))

# A toy 60-frame video with three actions and 4-d features.
labels = np.repeat([0, 2, 1], [25, 20, 15])
features = np.eye(4)[labels] + 0.1 * rng.normal(size=(60, 4))

for w in (5, 10, 20):
    s = pool_features(features, labels, w)
    print(f"w={w:2d}: {len(s.features)} pooled frames, labels {s.labels.tolist()}")


# Test time: average the predictions made at every window, stretched back to 60 frames.
def toy_model(pooled):
    logits = pooled[:, :3] * 5.0
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


p = test_time_aggregate(toy_model, features, dist)
print("aggregated shape", p.shape, "row sums in [%.12f, %.12f]" % (p.sum(1).min(), p.sum(1).max()))
print("frame accuracy %.1f%%" % (100 * np.mean(p.argmax(1) == labels)))
