"""Train a small coarse-to-fine network on synthetic videos and inspect it.

Run with ``python demos/segment_synthetic.py``.  Takes a few seconds on one core.
"""

import numpy as np

from c2ftcn.data import SyntheticSpec, activity_action_sets, make_synthetic
from c2ftcn.metrics import expected_calibration_error, to_segments
from c2ftcn.trainer import TrainConfig, evaluate, fit, per_layer_reports

spec = SyntheticSpec(seed=0, num_videos=24, noise=1.0)
ds = make_synthetic(spec)
train, test = ds.subset(ds.ids()[:18]), ds.subset(ds.ids()[18:])
print(f"{len(train.videos)} training videos, {len(test.videos)} held out, {ds.num_classes} actions")
print("actions per activity:", spec.activity_subsets())

cfg = TrainConfig(epochs=40, learning_rate=1e-3, batch_size=6, w0=4, seed=0,
                  encoder_widths=(32,) * 7, decoder_width=32, mlp_hidden=16)
result = fit(train, cfg, on_epoch=lambda e, s: e % 10 == 0 and print(f"epoch {e}: total loss {s['total']:.3f}"))
model = result.model

report = evaluate(model, test, cfg, activity_sets=activity_action_sets(ds))
print("\nheld-out metrics")
for name, value in report.metrics.items():
    print(f"  {name:16s} {value:6.2f}")
print(f"  ECE              {100 * expected_calibration_error(report.calibration):6.2f}")

# Each decoder layer on its own next to the ensemble.
print("\nlayer      MoF   Edit")
for name, rep in per_layer_reports(model, test, cfg).items():
    print(f"{name:9s} {rep.metrics['mof']:5.1f} {rep.metrics['edit']:6.1f}")

v = test.videos[0]
pred, _ = report.predictions[v.id]
print("\nground truth:", [(int(s.label), s.end - s.start) for s in to_segments(v.frame_labels)])
print("prediction:  ", [(int(s.label), s.end - s.start) for s in to_segments(pred)])
print("frames wrong:", int(np.sum(pred != v.frame_labels)))

# Coarse layers are stretched to the full length with endpoint-aligned interpolation,
# so their first and last frames land on the video ends rather than at the centre of
# the span they summarise.  Short spurious segments at the very start or end of the
# ensemble's output usually come from that.
