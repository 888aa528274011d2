"""The MNIST model family used by the experiments: one undistilled baseline
plus a distilled student per temperature, trained once and cached on disk."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from advl.io import load_idx, load_model, save_model
from advl.network import build_network, mnist_layers
from advl.training import TrainConfig, accuracy, distill, train

log = logging.getLogger(__name__)

MNIST_FILES = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
               "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")


def default_mnist_dir():
    """``$ADVL_DATA`` if set, else the ``data/mnist`` folder of the source checkout."""
    env = os.environ.get("ADVL_DATA")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def load_mnist(root=None):
    """``(train, test)`` datasets from the four IDX files under ``root``."""
    root = Path(root) if root is not None else default_mnist_dir()
    f = [root / name for name in MNIST_FILES]
    return load_idx(f[0], f[1]), load_idx(f[2], f[3])


@dataclass
class FamilyConfig:
    temperatures: tuple = (1.0, 5.0, 20.0, 100.0)
    baseline_epochs: int = 4
    teacher_epochs: int = 3
    student_epochs: int = 3
    batch_size: int = 128
    learning_rate: float = 5e-3
    lr_decay: float = 0.6
    precision: str = "float32"
    seed: int = 0

    def train_config(self, epochs, temperature=1.0, seed=None):
        return TrainConfig(epochs=epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, optimizer="adam",
                           seed=self.seed if seed is None else seed,
                           temperature=temperature, lr_decay=self.lr_decay,
                           precision=self.precision)

    def fingerprint(self):
        d = asdict(self)
        d["temperatures"] = [float(t) for t in self.temperatures]
        return d


@dataclass
class ModelFamily:
    """``baseline`` plus ``students[T]`` (deployed at temperature 1)."""

    baseline: object
    students: dict
    teachers: dict = field(default_factory=dict)
    test_accuracy: dict = field(default_factory=dict)
    train_seconds: dict = field(default_factory=dict)

    def by_temperature(self):
        """Temperature -> deployed model; the baseline is listed under ``0``."""
        out = {0.0: self.baseline}
        out.update(self.students)
        return out

    @property
    def total_train_seconds(self):
        return float(sum(self.train_seconds.values()))


def _key(T):
    return f"T{float(T):g}"


def train_family(train_data, test_data, cfg=None, cache_dir=None):
    """Train (or load from ``cache_dir``) the baseline and distilled students.

    A temperature-1 teacher is a hard-label network at T=1, which is what the
    baseline already is, so the baseline serves as that teacher. A cache is only
    reused when its recorded config matches ``cfg``.
    """
    cfg = cfg or FamilyConfig()
    cache = Path(cache_dir) if cache_dir is not None else None
    meta_path = cache / "family.json" if cache else None
    if meta_path is not None and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("config") == cfg.fingerprint():
            return _load_family(cache, meta, cfg)

    layers = mnist_layers(train_data.classes)
    fam = ModelFamily(None, {})
    t0 = time.perf_counter()
    fam.baseline = train(build_network("mnist", train_data.image_shape, train_data.classes,
                                       cfg.seed),
                         train_data, None, cfg.train_config(cfg.baseline_epochs))
    fam.train_seconds["baseline"] = time.perf_counter() - t0
    fam.test_accuracy["baseline"] = accuracy(fam.baseline, test_data)
    log.info("baseline: %.4f test accuracy, %.0fs", fam.test_accuracy["baseline"],
             fam.train_seconds["baseline"])

    for T in cfg.temperatures:
        T = float(T)
        t0 = time.perf_counter()
        reuse = fam.baseline if T == 1.0 else None
        teacher, student = distill(
            train_data, cfg.train_config(cfg.teacher_epochs, T), layers, teacher=reuse,
            student_cfg=cfg.train_config(cfg.student_epochs, T, seed=cfg.seed + 1))
        fam.train_seconds[_key(T)] = time.perf_counter() - t0
        fam.teachers[T], fam.students[T] = teacher, student
        fam.test_accuracy[_key(T)] = accuracy(student, test_data)
        log.info("student T=%g: %.4f test accuracy, %.0fs", T, fam.test_accuracy[_key(T)],
                 fam.train_seconds[_key(T)])

    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_model(fam.baseline, cache / "baseline.advl")
        for T in fam.students:
            save_model(fam.students[T], cache / f"student_{_key(T)}.advl")
            save_model(fam.teachers[T], cache / f"teacher_{_key(T)}.advl")
        meta_path.write_text(json.dumps({
            "config": cfg.fingerprint(), "test_accuracy": fam.test_accuracy,
            "train_seconds": fam.train_seconds}, indent=2, sort_keys=True))
    return fam


def _load_family(cache, meta, cfg):
    fam = ModelFamily(load_model(cache / "baseline.advl"), {},
                      test_accuracy=dict(meta["test_accuracy"]),
                      train_seconds=dict(meta["train_seconds"]))
    for T in cfg.temperatures:
        T = float(T)
        fam.students[T] = load_model(cache / f"student_{_key(T)}.advl")
        fam.teachers[T] = load_model(cache / f"teacher_{_key(T)}.advl")
    return fam
