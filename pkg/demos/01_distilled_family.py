"""Train (or load) the MNIST family and look at what distillation does to the outputs.

    python demos/01_distilled_family.py

The first run trains a baseline and four distilled students, about 12 minutes
on one core; later runs load them from .cache/family.
"""
import logging
from pathlib import Path

import numpy as np

from advl.network import forward
from advl.training import mean_max_probability
from advl.zoo import FamilyConfig, load_mnist, train_family

logging.basicConfig(level=logging.INFO, format="%(message)s")
CACHE = Path(__file__).resolve().parents[1] / ".cache" / "family"

train, test = load_mnist()
print(f"train {len(train.labels)} images, test {len(test.labels)} images")
family = train_family(train, test, FamilyConfig(), cache_dir=CACHE)

print("\nmodel        test acc   mean top probability   train s")
for T, net in family.by_temperature().items():
    key = "baseline" if T == 0 else f"T{T:g}"
    conf = mean_max_probability(net, test)
    print(f"{key:<12} {family.test_accuracy[key]:.3f}      {conf:.6f}               "
          f"{family.train_seconds[key]:.0f}")

# At deployment (T=1) a student trained at high temperature has logits
# scaled up by roughly T, so its softmax is almost one-hot. That saturation
# is what starves probability-based gradients.
x = test.images[:1]
for T in (0.0, 100.0):
    z = forward(family.by_temperature()[T], x).logits[0]
    print(f"\n{'baseline' if T == 0 else 'T=100 student'} logits: {np.round(z, 1)}")
