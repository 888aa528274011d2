"""Success rates, 8-bit distortion measures and experiment reports."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from advl.tensor import DomainError, ShapeError

REPORT_COLUMNS = (
    "model_id", "temperature", "attack", "epsilon_8bit", "sigma", "success_rate",
    "mean_max_pert_8bit", "mean_l2_8bit", "mean_wall_time", "median_wall_time",
    "median_iterations", "samples", "seed",
)
TIMING_COLUMNS = ("mean_wall_time", "median_wall_time")


def success_rate(results):
    """Fraction of attack attempts whose output is classified as the target.

    Every attempted (image, target) cell counts, whatever the original
    prediction was.
    """
    results = list(results)
    if not results:
        raise DomainError("success rate of an empty result list")
    return sum(bool(r.success) for r in results) / len(results)


def _pair(x, x_adv):
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    return x, x_adv


def max_perturbation_8bit(x, x_adv):
    """Largest single-pixel change, in 0..255 units."""
    x, x_adv = _pair(x, x_adv)
    return 255.0 * float(np.max(np.abs(x_adv - x))) if x.size else 0.0


def l2_distortion_8bit(x, x_adv):
    """Euclidean distance between the two images, in 0..255 units."""
    x, x_adv = _pair(x, x_adv)
    return 255.0 * float(np.linalg.norm((x_adv - x).ravel()))


def summarize(results, **meta):
    """Aggregate one experiment cell into a report row (means over all attempts)."""
    results = list(results)
    times = np.array([r.wall_time for r in results])
    row = {k: meta.get(k, "") for k in REPORT_COLUMNS}
    row.update(
        success_rate=success_rate(results),
        mean_max_pert_8bit=float(np.mean([r.max_pert_8bit for r in results])),
        mean_l2_8bit=float(np.mean([r.l2_distortion_8bit for r in results])),
        mean_wall_time=float(times.mean()),
        median_wall_time=float(np.median(times)),
        median_iterations=float(np.median([r.iterations_used for r in results])),
        samples=len(results),
    )
    return row


def _fmt(value):
    if isinstance(value, float):
        return repr(round(value, 10)) if math.isfinite(value) else str(value)
    return str(value)


@dataclass
class ExperimentReport:
    """Rows of per-cell aggregates.

    With ``include_timing`` off, wall-time columns are written empty so that
    the CSV is a pure function of models, data, config and seed.
    """

    rows: list = field(default_factory=list)
    include_timing: bool = True
    title: str = ""

    def add(self, row):
        if not 0.0 <= row["success_rate"] <= 1.0:
            raise ValueError("success_rate outside [0, 1]")
        if row["samples"] <= 0:
            raise ValueError("a report row needs at least one sample")
        self.rows.append(dict(row))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow(["" if (not self.include_timing and k in TIMING_COLUMNS) else
                             _fmt(row.get(k, "")) for k in REPORT_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text):
        text = path_or_text
        if "\n" not in str(path_or_text):
            with open(path_or_text, encoding="utf-8") as fh:
                text = fh.read()
        reader = csv.DictReader(io.StringIO(text))
        report = cls()
        timing_seen = False
        for raw in reader:
            row = {}
            for k in REPORT_COLUMNS:
                v = raw.get(k, "")
                if k in ("model_id", "attack"):
                    row[k] = v
                elif k in ("samples", "seed"):
                    row[k] = int(v) if v != "" else ""
                else:
                    row[k] = float(v) if v != "" else ""
                if k in TIMING_COLUMNS and v != "":
                    timing_seen = True
            report.rows.append(row)
        report.include_timing = timing_seen
        return report

    def render(self):
        """Fixed-width text table; means are over every attempted cell."""
        heads = ["model", "T", "attack", "eps", "sigma", "success", "max_pert", "l2",
                 "mean_s", "median_s", "med_iter", "n"]
        keys = ["model_id", "temperature", "attack", "epsilon_8bit", "sigma", "success_rate",
                "mean_max_pert_8bit", "mean_l2_8bit", "mean_wall_time", "median_wall_time",
                "median_iterations", "samples"]
        lines = []
        if self.title:
            lines.append(self.title)
        lines.append("# means/medians taken over all attempted (image, target) cells")
        body = []
        for row in self.rows:
            cells = []
            for k in keys:
                v = row.get(k, "")
                if k in TIMING_COLUMNS and not self.include_timing:
                    v = ""
                if isinstance(v, float):
                    v = f"{v:.4f}" if k in ("success_rate",) or k in TIMING_COLUMNS else f"{v:.4g}"
                cells.append(str(v))
            body.append(cells)
        widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
                  for i, h in enumerate(heads)]
        lines.append("  ".join(h.rjust(w) for h, w in zip(heads, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for cells in body:
            lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
        return "\n".join(lines) + "\n"


def render_transfer_matrix(sources, targets, matrix, title="targeted success of transferred examples"):
    """Source-temperature rows by target-temperature columns."""
    head = ["src\\dst"] + [f"T={t:g}" for t in targets]
    rows = [[f"T={s:g}"] + [f"{v:.3f}" for v in line] for s, line in zip(sources, matrix)]
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    out = [title, "  ".join(h.rjust(w) for h, w in zip(head, widths))]
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(out) + "\n"


def transfer_matrix_csv(sources, targets, matrix):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source_temperature"] + [f"{t:g}" for t in targets])
    for s, line in zip(sources, matrix):
        writer.writerow([f"{s:g}"] + [_fmt(float(v)) for v in line])
    return buf.getvalue()


# --- experiment grids -------------------------------------------------------

def target_grid(labels, classes, mode="all", seed=0):
    """Expand images into attack cells.

    ``mode="all"`` pairs every image with each of the ``classes - 1`` labels
    other than its own; ``mode="random"`` draws one such label per image.
    Returns ``(image_index, targets, cell_ids)``; cell ids are stable row
    numbers that seed per-cell randomness.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if mode == "all":
        img = np.repeat(np.arange(len(labels)), classes - 1)
        offs = np.tile(np.arange(1, classes), len(labels))
        targets = (labels[img] + offs) % classes
    elif mode == "random":
        rng = np.random.default_rng(seed)
        img = np.arange(len(labels))
        targets = (labels + rng.integers(1, classes, size=len(labels))) % classes
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    return img, targets, np.arange(len(img))


def model_label(temperature):
    """Report id for a model keyed by distillation temperature (0 = undistilled)."""
    return "baseline" if float(temperature) == 0 else f"student_T{float(temperature):g}"


def sweep(axis, grid, cfg, models, images, targets, temperature=0.0, cell_ids=None,
          include_timing=True):
    """One report row per grid point along ``epsilon``, ``temperature`` or ``sigma``.

    ``cfg`` is an ``EpsAttackConfig`` (white-box) or ``RegionAttackConfig``
    (region-based); grid values replace its ``epsilon_8bit`` or ``sigma``
    field, or pick ``models[T]`` along the temperature axis. Other axes use
    ``models[temperature]``. Rows are deterministic given the seed in ``cfg``.
    """
    from dataclasses import replace

    from advl.blackbox import ConfigurationError, NetworkOracle, RegionAttackConfig, region_attack_batch
    from advl.whitebox import EpsAttackConfig, epsilon_attack_batch

    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    if axis not in ("epsilon", "temperature", "sigma"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    region = isinstance(cfg, RegionAttackConfig)
    if not region and not isinstance(cfg, EpsAttackConfig):
        raise ConfigurationError(f"unsupported attack config {type(cfg).__name__}")
    if axis == "sigma" and not region:
        raise ConfigurationError("the sigma axis needs a region-attack config")
    temps = grid if axis == "temperature" else [temperature]
    missing = [T for T in temps if T not in models]
    if missing:
        raise ConfigurationError(f"no model for temperature(s) {missing}")
    if images is None or len(images) == 0:
        raise ConfigurationError("sweep needs a nonempty image set")

    report = ExperimentReport(include_timing=include_timing, title=f"sweep over {axis}")
    for value in grid:
        T = value if axis == "temperature" else temperature
        c = cfg
        if axis == "epsilon":
            c = replace(cfg, epsilon_8bit=value)
        elif axis == "sigma":
            c = replace(cfg, sigma=value)
        if region:
            res = region_attack_batch(NetworkOracle(models[T]), images, targets, c, cell_ids)
        else:
            res = epsilon_attack_batch(models[T], images, targets, c)
        report.add(summarize(res, model_id=model_label(T), temperature=float(T),
                             attack="region" if region else "epsilon",
                             epsilon_8bit=float(c.epsilon_8bit),
                             sigma=float(c.sigma) if region else 0.0,
                             seed=int(getattr(c, "seed", 0))))
    return report
