"""Attack a mildly distilled model, replay its adversarials on hotter ones.

    python demos/04_bypass.py [n_images]

Direct attacks on the T=100 student rarely succeed; examples crafted on the
T=5 student transfer to it well.
"""
import sys
from pathlib import Path

from advl.blackbox import NetworkOracle, RegionAttackConfig, bypass_matrix, region_attack_batch
from advl.metrics import render_transfer_matrix, success_rate, target_grid
from advl.zoo import FamilyConfig, load_mnist, train_family

n = int(sys.argv[1]) if len(sys.argv) > 1 else 20
train, test = load_mnist()
family = train_family(train, test, FamilyConfig(),
                      cache_dir=Path(__file__).resolve().parents[1] / ".cache" / "family")
models = family.by_temperature()
img, targets, ids = target_grid(test.labels[:n], test.classes, mode="random", seed=0)
x = test.images[img]

attack = RegionAttackConfig(sigma=0.4, epsilon_8bit=120, kappa=40.0, learning_rate=0.03, max_iters=300)
temps = [1.0, 5.0, 20.0, 100.0]
matrix, _ = bypass_matrix([5.0], temps, models, x, targets, attack, ids)
print(render_transfer_matrix([5.0], temps, matrix))

direct = region_attack_batch(NetworkOracle(models[100.0]), x, targets, attack, ids)
print(f"\ndirect attack on T=100: {success_rate(direct):.2f}")
