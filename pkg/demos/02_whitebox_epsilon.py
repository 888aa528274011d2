"""White-box targeted attack inside an L-infinity box, baseline vs a distilled student.

    python demos/02_whitebox_epsilon.py [n_images]

Every test image is attacked toward each of the nine other classes. The
box radius is given in 8-bit pixel units.
"""
import sys
from pathlib import Path

from advl.metrics import ExperimentReport, summarize, target_grid
from advl.whitebox import EpsAttackConfig, epsilon_attack_batch
from advl.zoo import FamilyConfig, load_mnist, train_family

n = int(sys.argv[1]) if len(sys.argv) > 1 else 5
train, test = load_mnist()
family = train_family(train, test, FamilyConfig(),
                      cache_dir=Path(__file__).resolve().parents[1] / ".cache" / "family")

img, targets, _ = target_grid(test.labels[:n], test.classes, mode="all")
x = test.images[img]

report = ExperimentReport()
for name, net in (("baseline", family.baseline), ("student_T100", family.students[100.0])):
    for eps in (52, 80, 120):
        res = epsilon_attack_batch(net, x, targets,
                                   EpsAttackConfig(epsilon_8bit=eps, learning_rate=0.1, max_iters=100))
        report.add(summarize(res, model_id=name, attack="eps", epsilon_8bit=eps))
        print(f"{name:<13} eps {eps:>3}: success {report.rows[-1]['success_rate']:.2f}", flush=True)

print()
print(report.render())
