"""Command-line entry points chaining ingestion, training, attacks and reports.

Every command that produces artifacts writes ``manifest.json`` next to them;
``advl --manifest DIR/manifest.json [--out NEW_DIR]`` replays the run from it.
Failures print one line ``advl: error[<category>]: <message>`` on stderr and
exit with a category-specific status (2 = usage, 3 = configuration,
4 = data/model file, 1 = any other runtime failure).
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

import advl
from advl.blackbox import (ConfigurationError, NetworkOracle, RegionAttackConfig, bypass_matrix,
                           noise_robustness, region_attack_batch)
from advl.io import IngestionError, ModelFormatError, load_model, save_model
from advl.metrics import (ExperimentReport, model_label, render_transfer_matrix, summarize, sweep,
                          target_grid, transfer_matrix_csv)
from advl.network import build_network
from advl.training import TrainConfig, accuracy, distill, train
from advl.whitebox import EpsAttackConfig, epsilon_attack_batch
from advl.zoo import load_mnist

log = logging.getLogger("advl")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA = 1, 2, 3, 4
CHUNK = 100  # attack cells per work unit; fixed so results never depend on --workers


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_seed():
    raw = os.environ.get("ADVL_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"ADVL_SEED must be an integer, got {raw!r}") from None


def _temperature_model(text):
    # "T=path" pairs for --models
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected T=PATH, got {text!r}")
    t, path = text.split("=", 1)
    try:
        return float(t), path
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad temperature in {text!r}") from None


def build_parser():
    p = _Parser(prog="advl", description="Adversarial examples against distilled networks.")
    p.add_argument("--manifest", help="replay the run recorded in this manifest.json")
    p.add_argument("--out", help="output directory (also overrides a replayed manifest's)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--seed", type=int, default=None, help="default: $ADVL_SEED or 0")
        sp.add_argument("--out", dest="sub_out", default=None, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="parallel attack workers")
        sp.add_argument("--reproducible", action="store_true",
                        help="single worker and no wall-time columns, for byte-identical reruns")
        if data:
            sp.add_argument("--data", default=None, help="folder with the MNIST IDX files")

    def training(sp, epochs):
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--batch-size", type=int, default=128)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--lr-decay", type=float, default=1.0, help="per-epoch lr multiplier")
        sp.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
        sp.add_argument("--precision", choices=("float32", "float64"), default="float64",
                        help="arithmetic inside the training loop; saved models are float64")

    def cells(sp):
        sp.add_argument("--images", type=int, default=100, help="first N test images")
        sp.add_argument("--targets", choices=("all", "random"), default="all")

    def eps_opts(sp):
        sp.add_argument("--epsilon", type=float, default=52.0, help="box radius in 8-bit units")
        sp.add_argument("--kappa", type=float, default=0.0)
        sp.add_argument("--max-iters", type=int, default=1000)
        sp.add_argument("--lr", type=float, default=0.1)

    def region_opts(sp):
        eps_opts(sp)
        sp.add_argument("--sigma", type=float, default=0.4)
        sp.add_argument("--delta-f", type=float, default=1e-12)
        sp.add_argument("--gradient-mode", choices=("analytic-output-only", "finite-difference"),
                        default="analytic-output-only")
        sp.add_argument("--fd-coords", type=int, default=None)
        sp.add_argument("--no-clip-noise", dest="clip_noise", action="store_false",
                        help="do not clamp the noisy gradient point to [0, 1]")

    sp = sub.add_parser("train", help="train on hard labels")
    common(sp)
    training(sp, 5)
    sp.add_argument("--temperature", type=float, default=1.0)

    sp = sub.add_parser("distill", help="two-phase defensive distillation")
    common(sp)
    training(sp, 3)
    sp.add_argument("--T", type=float, required=True, dest="T")
    sp.add_argument("--student-epochs", type=int, default=None)

    sp = sub.add_parser("attack-eps", help="white-box epsilon-neighborhood attack")
    common(sp)
    cells(sp)
    eps_opts(sp)
    sp.add_argument("--model", required=True)

    sp = sub.add_parser("attack-region", help="region-based black-box attack")
    common(sp)
    cells(sp)
    region_opts(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--noise-trials", type=int, default=0,
                    help="also measure retained success under test noise sigma")

    sp = sub.add_parser("bypass", help="transfer region adversarials across temperatures")
    common(sp)
    cells(sp)
    region_opts(sp)
    sp.add_argument("--models", type=_temperature_model, nargs="+", required=True,
                    metavar="T=PATH")
    sp.add_argument("--source-T", type=float, nargs="+", required=True, dest="source_T")
    sp.add_argument("--target-Ts", type=float, nargs="+", required=True, dest="target_Ts")

    sp = sub.add_parser("sweep", help="one report row per grid value")
    common(sp)
    cells(sp)
    region_opts(sp)
    sp.add_argument("--axis", choices=("epsilon", "temperature", "sigma"), required=True)
    sp.add_argument("--grid", type=float, nargs="+", required=True)
    sp.add_argument("--attack", choices=("eps", "region"), default="eps")
    sp.add_argument("--models", type=_temperature_model, nargs="+", required=True,
                    metavar="T=PATH", help="use T=0 for the undistilled model")
    sp.add_argument("--temperature", type=float, default=0.0,
                    help="model used along the epsilon/sigma axes")

    sp = sub.add_parser("report", help="re-render a report CSV as a text table")
    sp.add_argument("csv")
    sp.add_argument("--out", dest="sub_out", default=None, help="also write the table here")
    return p


# --- helpers -----------------------------------------------------------------

def _outdir(args):
    out = Path(args.out or f"runs/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(args, out, extra=None):
    record = {k: v for k, v in vars(args).items() if k not in ("out", "manifest", "verbose")}
    if record.get("models"):
        record["models"] = [list(m) for m in record["models"]]
    manifest = {"command": args.command, "args": record, "seed": args.seed,
                "version": advl.__version__, "outputs": sorted(p.name for p in out.iterdir()
                                                               if p.name != "manifest.json")}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _load_manifest(path):
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
        args = dict(manifest["args"])
        args["command"] = manifest["command"]
    except (OSError, ValueError, KeyError) as e:
        raise ConfigurationError(f"unreadable manifest {path}: {e}") from None
    if args.get("models"):
        args["models"] = [tuple(m) for m in args["models"]]
    return argparse.Namespace(**args)


def _load_net(path):
    if not Path(path).exists():
        raise ConfigurationError(f"model file not found: {path}")
    return load_model(path)


def _cells(args, test):
    n = min(args.images, len(test))
    if n <= 0:
        raise ConfigurationError("--images must be positive")
    img, targets, ids = target_grid(test.labels[:n], test.classes, args.targets, args.seed)
    return test.images[img], targets, ids


def _run_chunked(fn, images, targets, ids, workers):
    """Run ``fn`` over fixed-size chunks of cells, possibly in parallel threads."""
    spans = [(s, min(s + CHUNK, len(images))) for s in range(0, len(images), CHUNK)]
    job = lambda s: fn(images[s[0]:s[1]], targets[s[0]:s[1]], ids[s[0]:s[1]])  # noqa: E731
    if workers <= 1:
        parts = [job(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, spans))
    return [r for part in parts for r in part]


def _eps_cfg(args):
    return EpsAttackConfig(epsilon_8bit=args.epsilon, kappa=args.kappa, max_iters=args.max_iters,
                           learning_rate=args.lr)


def _region_cfg(args):
    return RegionAttackConfig(sigma=args.sigma, delta_f=args.delta_f, max_iters=args.max_iters,
                              kappa=args.kappa, epsilon_8bit=args.epsilon, learning_rate=args.lr,
                              gradient_mode=args.gradient_mode, fd_coords=args.fd_coords,
                              clip_noise=args.clip_noise, seed=args.seed)


def _emit(report, out, text_extra=""):
    report.to_csv(out / "report.csv")
    text = report.render() + text_extra
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# --- commands ----------------------------------------------------------------

def cmd_train(args, out):
    tr, te = load_mnist(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      optimizer=args.optimizer, seed=args.seed, temperature=args.temperature,
                      lr_decay=args.lr_decay, precision=args.precision)
    t0 = time.perf_counter()
    net = train(build_network("mnist", tr.image_shape, tr.classes, args.seed), tr, None, cfg)
    secs = time.perf_counter() - t0
    save_model(net, out / "model.advl")
    acc = accuracy(net.with_temperature(1.0), te)
    print(f"test accuracy {acc:.4f}  ({secs:.0f}s)  -> {out / 'model.advl'}")
    return {"test_accuracy": acc}


def cmd_distill(args, out):
    tr, te = load_mnist(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      optimizer=args.optimizer, seed=args.seed, temperature=args.T,
                      lr_decay=args.lr_decay, precision=args.precision)
    scfg = None
    if args.student_epochs is not None:
        scfg = TrainConfig(**{**vars(cfg), "epochs": args.student_epochs, "seed": args.seed + 1})
    teacher, student = distill(tr, cfg, student_cfg=scfg)
    tag = f"T{args.T:g}"
    save_model(teacher, out / f"teacher_{tag}.advl")
    save_model(student, out / f"student_{tag}.advl")
    acc = accuracy(student, te)
    print(f"student T={args.T:g}: test accuracy {acc:.4f}  -> {out / f'student_{tag}.advl'}")
    return {"test_accuracy": acc}


def cmd_attack_eps(args, out):
    net = _load_net(args.model)
    _, te = load_mnist(args.data)
    images, targets, ids = _cells(args, te)
    cfg = _eps_cfg(args)
    res = _run_chunked(lambda x, t, _: epsilon_attack_batch(net, x, t, cfg), images, targets, ids,
                       args.workers)
    rep = ExperimentReport(include_timing=not args.reproducible, title="epsilon-neighborhood attack")
    rep.add(summarize(res, model_id=Path(args.model).stem, temperature=net.temperature,
                      attack="epsilon", epsilon_8bit=args.epsilon, sigma=0.0, seed=args.seed))
    _emit(rep, out)
    return {"success_rate": rep.rows[0]["success_rate"]}


def cmd_attack_region(args, out):
    net = _load_net(args.model)
    _, te = load_mnist(args.data)
    images, targets, ids = _cells(args, te)
    cfg = _region_cfg(args)
    oracle = NetworkOracle(net)
    res = _run_chunked(lambda x, t, c: region_attack_batch(oracle, x, t, cfg, c), images, targets,
                       ids, args.workers)
    rep = ExperimentReport(include_timing=not args.reproducible, title="region-based attack")
    rep.add(summarize(res, model_id=Path(args.model).stem, temperature=net.temperature,
                      attack="region", epsilon_8bit=args.epsilon, sigma=args.sigma, seed=args.seed))
    extra = ""
    info = {"success_rate": rep.rows[0]["success_rate"], "queries": oracle.query_count}
    if args.noise_trials > 0:
        adv = np.stack([r.adversarial for r in res])
        kept = noise_robustness(adv, oracle, targets, args.sigma, args.noise_trials, args.seed)
        extra = f"retained targeted rate under test noise sigma={args.sigma:g}: {kept:.4f}\n"
        info["noise_retained"] = kept
    _emit(rep, out, extra)
    return info


def _models(pairs):
    return {float(T): _load_net(path) for T, path in pairs}


def cmd_bypass(args, out):
    models = _models(args.models)
    _, te = load_mnist(args.data)
    images, targets, ids = _cells(args, te)
    matrix, runs = bypass_matrix(args.source_T, args.target_Ts, models, images, targets,
                                 _region_cfg(args), ids)
    (out / "transfer.csv").write_text(transfer_matrix_csv(args.source_T, args.target_Ts, matrix),
                                      encoding="utf-8")
    rep = ExperimentReport(include_timing=not args.reproducible,
                           title="direct region attacks on the source models")
    for T, run in zip(args.source_T, runs):
        rep.add(summarize(run.source_results, model_id=model_label(T), temperature=T,
                          attack="region", epsilon_8bit=args.epsilon, sigma=args.sigma,
                          seed=args.seed))
    _emit(rep, out, render_transfer_matrix(args.source_T, args.target_Ts, matrix))
    return {"transfer": matrix.tolist()}


def cmd_sweep(args, out):
    models = _models(args.models)
    _, te = load_mnist(args.data)
    images, targets, ids = _cells(args, te)
    cfg = _region_cfg(args) if args.attack == "region" else _eps_cfg(args)
    rep = sweep(args.axis, args.grid, cfg, models, images, targets, args.temperature, ids,
                include_timing=not args.reproducible)
    _emit(rep, out)
    return {"success_rate": rep.column("success_rate")}


def cmd_report(args):
    path = Path(args.csv)
    if not path.exists():
        raise ConfigurationError(f"report file not found: {path}")
    text = ExperimentReport.from_csv(path).render()
    if args.sub_out:
        Path(args.sub_out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


COMMANDS = {"train": cmd_train, "distill": cmd_distill, "attack-eps": cmd_attack_eps,
            "attack-region": cmd_attack_region, "bypass": cmd_bypass, "sweep": cmd_sweep}


def run(args):
    """Execute a parsed command; returns the process exit status."""
    if args.command == "report":
        cmd_report(args)
        return 0
    if args.seed is None:
        args.seed = _env_seed()
    if args.reproducible:
        args.workers = 1
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    out = _outdir(args)
    t0 = time.perf_counter()
    info = COMMANDS[args.command](args, out) or {}
    extra = {"result": info}
    if not args.reproducible:
        extra["elapsed_seconds"] = round(time.perf_counter() - t0, 3)
    _write_manifest(args, out, extra)
    return 0


def _fail(category, message, status):
    line = " ".join(str(message).split())
    sys.stderr.write(f"advl: error[{category}]: {line}\n")
    return status


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.manifest:
            out = args.out
            args = _load_manifest(args.manifest)
            args.out, args.verbose, args.manifest = out, False, None
        else:
            if args.command is None:
                raise UsageError("a command is required")
            args.out = getattr(args, "sub_out", None) or args.out
        return run(args)
    except UsageError as e:
        return _fail("usage", e, EXIT_USAGE)
    except ConfigurationError as e:
        return _fail("configuration", e, EXIT_CONFIG)
    except (IngestionError, ModelFormatError, FileNotFoundError) as e:
        return _fail("data", e, EXIT_DATA)
    except ValueError as e:
        return _fail("configuration", e, EXIT_CONFIG)
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        return _fail("runtime", f"{type(e).__name__}: {e}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
