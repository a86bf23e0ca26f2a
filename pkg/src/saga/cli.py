"""Command-line pipeline: gen-data, train-*, shared-basis, attack, evaluate, analyze.

Every command resolves its parameters as flag > ``--config`` JSON > default
(the seed additionally honours ``SAGA_SEED`` over the config file), writes the
resolved record next to its outputs, and returns exit code 0 on success, 1 on
a validation error and 2 on a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (PRESETS, AttackConfig, AttackError, AttackResult, LossWeights, matched_euclidean_lr,
                     preset)
from .autodiff import NonFiniteError
from .datagen import DatasetError, default_family, generate_dataset, load_manifest, load_split
from .evaluate import (Pair, campaign_report, curvature_distortion, detector_protocol, frequency_sweep, make_pairs,
                       run_campaign, spectral_profile, stability_accuracy, sweep_csv, transfer_attack)
from .mesh import Mesh, MeshError, read_mesh, save_mesh
from .nn import (CheckpointError, TrainConfig, load_model, reconstruction_error, save_model, train_autoencoder,
                 train_classifier, train_detector)
from .serialize import dumps17
from .spectral import SpectralError, basis_from_json, basis_to_json, build_shared_basis, representation_error

log = logging.getLogger("saga")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


# (name, type, default, help); nargs lists use a tuple type (type, nargs)
COMMON_TRAIN = [
    ("manifest", str, "data/manifest.json", "dataset manifest"),
    ("epochs", int, None, "training epochs"),
    ("batch_size", int, None, "batch size"),
    ("lr", float, None, "learning rate"),
]

COMMANDS = {
    "gen-data": [
        ("classes", int, 3, "number of classes"),
        ("per_class", int, 60, "instances per class"),
        ("splits", (float, 3), [0.7, 0.1, 0.2], "train/val/test fractions"),
        ("amplitude", float, 0.06, "class displacement amplitude"),
        ("jitter", float, 0.01, "per-instance jitter amplitude"),
        ("expressions", int, 12, "size of the expression bank shared by all classes (0: none)"),
        ("expression_scale", float, 0.2, "expression displacement amplitude"),
        ("subdivisions", int, 3, "icosphere subdivision level"),
        ("out", str, "data", "dataset directory"),
    ],
    "train-ae": COMMON_TRAIN + [
        ("weight_decay", float, 0.0, "factor on the summed weight norms (all but the last layer)"),
        ("exclude_class", int, None, "leave one class out of training"),
        ("out", str, "models/ae.json", "checkpoint path"),
    ],
    "train-classifier": COMMON_TRAIN + [
        ("out", str, "models/classifier.json", "checkpoint path"),
    ],
    "train-detector": [
        ("results", str, "results/saga", "campaign directory"),
        ("epochs", int, 100, "training epochs"),
        ("batch_size", int, 16, "batch size"),
        ("lr", float, 1e-4, "learning rate"),
        ("out", str, "models/detector.json", "checkpoint path"),
    ],
    "shared-basis": [
        ("manifest", str, "data/manifest.json", "dataset manifest"),
        ("samples", int, None, "number of training meshes to combine (default min(35, train size))"),
        ("k", int, None, "basis size (default n)"),
        ("steps", int, 50, "optimization steps"),
        ("lr", float, 1e-5, "learning rate"),
        ("out", str, "basis/shared.json", "basis path"),
    ],
    "attack": [
        ("manifest", str, "data/manifest.json", "dataset manifest"),
        ("ae", str, "models/ae.json", "victim autoencoder checkpoint"),
        ("basis", str, "basis/shared.json", "spectral basis (spectral attacks only)"),
        ("method", str, "saga", "saga or euclidean"),
        ("preset", str, "desk", f"one of {sorted(PRESETS)}"),
        ("k", int, None, "perturbed frequencies"),
        ("steps", int, None, "optimization steps"),
        ("lr", float, None, "learning rate"),
        ("mode", str, None, "additive or multiplicative"),
        ("lambdas", (float, 4), None, "lap edge area norm weights"),
        ("split", str, "test", "split the sources and targets come from"),
        ("sources_per_class", int, 10, "sources per class"),
        ("targets", str, "nearest", "nearest or random target selection"),
        ("matched_lr", bool, False, "scale lr to the per-vertex step of a k-band spectral step (euclidean)"),
        ("name", str, None, "campaign name (default: method)"),
    ],
    "evaluate": [
        ("results", str, "results/saga", "campaign directory"),
        ("classifier", str, "models/classifier.json", "classifier checkpoint"),
        ("transfer_ae", str, None, "second autoencoder for the transfer report"),
        ("stability_iterations", int, 3, "autoencoder iterations for the stability report"),
        ("detector_epochs", int, 100, "detector training epochs (0 skips the detector)"),
        ("detector_lr", float, 1e-4, "detector learning rate"),
        ("detector_batch_size", int, 16, "detector batch size"),
        ("out", str, None, "report path (default: <results>/report.json)"),
    ],
    "analyze": [
        ("results", str, "results/saga", "campaign directory"),
        ("ks", (int, "+"), [5, 20, 50, 100], "band sizes for the frequency sweep"),
        ("sweep_pairs", int, 5, "pairs used by the sweep (0 skips it)"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saga", description="Spectral geometric attacks on mesh autoencoders.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--output-dir", default=".", help="base directory for every relative path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap; 1 is bitwise reproducible")
    p.add_argument("--config", default=None, help="JSON file with command parameters")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name)
        for key, typ, _default, help_ in opts:
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, action="store_const", const=True, default=None, help=help_)
            elif isinstance(typ, tuple):
                sp.add_argument(flag, type=typ[0], nargs=typ[1], default=None, help=help_)
            else:
                sp.add_argument(flag, type=typ, default=None, help=help_)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags into one flat record."""
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        try:
            file_cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path}: top level must be an object")
        # shared top-level keys apply where a command knows them; a section
        # named after the command is checked strictly
        known = {k for k, *_ in COMMANDS[args.command]} | {"seed", "threads"}
        section = file_cfg.get(args.command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config file {path}: section {args.command!r} must be an object")
        unknown = sorted(set(section) - known)
        if unknown:
            raise UsageError(f"config file {path}: unknown field(s) {unknown} in section {args.command!r}")
        file_cfg = {**{k: v for k, v in file_cfg.items() if k in known}, **section}
    cfg = {k: d for k, _t, d, _h in COMMANDS[args.command]}
    cfg.update({k: v for k, v in file_cfg.items() if k not in ("seed", "threads")})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    seed = file_cfg.get("seed", 0)
    if os.environ.get("SAGA_SEED"):
        try:
            seed = int(os.environ["SAGA_SEED"])
        except ValueError:
            raise UsageError(f"SAGA_SEED must be an integer, got {os.environ['SAGA_SEED']!r}") from None
    if args.seed is not None:
        seed = args.seed
    threads = args.threads if args.threads is not None else file_cfg.get("threads", 1)
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    cfg.update(seed=int(seed), threads=int(threads), command=args.command)
    return cfg


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data if isinstance(data, bytes) else data.encode("utf-8"))


def _write_config(path: Path, cfg: dict) -> None:
    _write(path, dumps17({"saga_version": __version__, **cfg}))


def _read(base: Path, rel: str, what: str) -> bytes:
    p = base / rel
    try:
        return p.read_bytes()
    except FileNotFoundError:
        raise UsageError(f"{what} {p} not found") from None


def _train_config(cfg: dict, defaults: TrainConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.get("epochs") or defaults.epochs,
        batch_size=cfg.get("batch_size") or defaults.batch_size,
        lr=cfg.get("lr") or defaults.lr,
        weight_decay_factor=cfg.get("weight_decay", defaults.weight_decay_factor),
        seed=cfg["seed"],
    )


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: dict, base: Path) -> dict:
    spec = default_family(cfg["classes"], cfg["seed"], cfg["amplitude"], cfg["subdivisions"], cfg["jitter"],
                          cfg["expressions"], cfg["expression_scale"])
    out = base / cfg["out"]
    man = generate_dataset(spec, cfg["per_class"], tuple(cfg["splits"]), cfg["seed"], out)
    _write_config(out / "gen-data.config.json", cfg)
    return {"manifest": str(out / "manifest.json"), "instances": len(man.instances),
            "nearest_centroid_test_accuracy": man.extra["nearest_centroid_test_accuracy"]}


def _load_manifest(base: Path, rel: str):
    return load_manifest(base / rel)


def cmd_train_ae(cfg: dict, base: Path) -> dict:
    man = _load_manifest(base, cfg["manifest"])
    train, ytr = load_split(man, "train")
    val, yv = load_split(man, "val")
    if cfg.get("exclude_class") is not None:
        c = cfg["exclude_class"]
        train = [m for m, y in zip(train, ytr) if y != c]
        val = [m for m, y in zip(val, yv) if y != c]
    model = train_autoencoder(train, _train_config(cfg, TrainConfig(epochs=300, batch_size=16, lr=1e-3)), val)
    model.normalization = man.normalization
    out = base / cfg["out"]
    _write(out, save_model(model))
    _write_config(out.with_suffix(".config.json"), cfg)
    return {"checkpoint": str(out), "train_recon": model.training_meta["train_recon"],
            "val_recon": model.training_meta["history"][-1].get("val_recon")}


def cmd_train_classifier(cfg: dict, base: Path) -> dict:
    man = _load_manifest(base, cfg["manifest"])
    train, ytr = load_split(man, "train")
    val, yv = load_split(man, "val")
    test, yte = load_split(man, "test")
    tc = _train_config(cfg, TrainConfig(epochs=10, batch_size=6, lr=1e-3))
    model = train_classifier(train, ytr, tc, val, yv, select_best=True)
    model.normalization = man.normalization
    acc = float(np.mean(model.predict(np.stack([m.vertices for m in test])) == yte))
    model.training_meta["test_accuracy"] = acc
    out = base / cfg["out"]
    _write(out, save_model(model))
    _write_config(out.with_suffix(".config.json"), cfg)
    return {"checkpoint": str(out), "test_accuracy": acc}


def cmd_shared_basis(cfg: dict, base: Path) -> dict:
    man = _load_manifest(base, cfg["manifest"])
    train, ytr = load_split(man, "train")
    P = cfg["samples"] or min(35, len(train))
    if not 1 <= P <= len(train):
        raise UsageError(f"--samples must lie in [1, {len(train)}]")
    # spread the samples over classes: round-robin through a seeded per-class order
    rng = np.random.default_rng([cfg["seed"], 5381])
    per = [list(rng.permutation(np.flatnonzero(ytr == c))) for c in np.unique(ytr)]
    picks = []
    while len(picks) < P:
        for lst in per:
            if lst and len(picks) < P:
                picks.append(int(lst.pop(0)))
    meshes = [train[i] for i in picks]
    k = cfg["k"] or meshes[0].n
    basis = build_shared_basis(meshes, k, cfg["steps"], cfg["lr"])
    out = base / cfg["out"]
    _write(out, basis_to_json(basis))
    test, _ = load_split(man, "test")
    errs = [representation_error(basis, m) for m in test]
    cfg = {**cfg, "resolved_samples": [m.name for m in meshes]}
    _write_config(out.with_suffix(".config.json"), cfg)
    return {"basis": str(out), "k": k, "final_loss": basis.loss_trace[-1],
            "mean_test_representation_error": float(np.mean(errs))}


def attack_config(cfg: dict) -> AttackConfig:
    over = {k: cfg[k] for k in ("k", "steps", "lr", "mode") if cfg.get(k) is not None}
    if cfg.get("lambdas") is not None:
        over["weights"] = LossWeights(*cfg["lambdas"])
    return preset(cfg["preset"], seed=cfg["seed"], **over)


def _pair_record(i: int, r: AttackResult, pair: Pair) -> dict:
    rec = {
        "index": i, "method": r.method, "mode": r.mode, "k": r.k,
        "source": r.meta["source"], "target": r.meta["target"],
        "source_index": pair.source, "target_index": pair.target,
        "source_class": pair.source_class, "target_class": pair.target_class,
        "delta_S": r.delta_S, "delta_T": r.delta_T,
        "B": r.B, "traces": {k: v for k, v in r.traces.items()},
    }
    if r.source_coeffs is not None:
        rec["source_coeffs_k"] = np.asarray(r.source_coeffs)[:r.k]
    return rec


def cmd_attack(cfg: dict, base: Path) -> dict:
    man = _load_manifest(base, cfg["manifest"])
    ae = load_model(_read(base, cfg["ae"], "autoencoder checkpoint"))
    acfg = attack_config(cfg)
    basis = None
    if cfg["method"] not in ("saga", "euclidean"):
        raise UsageError(f"--method must be saga or euclidean, got {cfg['method']!r}")
    if cfg["method"] == "saga" or cfg["matched_lr"]:
        basis = basis_from_json(_read(base, cfg["basis"], "basis"))
    if cfg["matched_lr"]:
        if cfg["method"] != "euclidean":
            raise UsageError("--matched-lr applies to euclidean campaigns only")
        acfg = replace(acfg, lr=matched_euclidean_lr(basis, acfg.k, acfg.lr))
        basis = None
    meshes, labels = load_split(man, cfg["split"])
    if not meshes:
        raise UsageError(f"split {cfg['split']!r} is empty")
    pairs = make_pairs(meshes, labels, cfg["sources_per_class"], cfg["targets"], cfg["seed"])
    results = run_campaign(meshes, pairs, ae, acfg, basis, cfg["method"], cfg["threads"])
    name = cfg["name"] or cfg["method"]
    out = base / "results" / name
    cfg = {**cfg, "name": name, "attack": acfg.to_dict()}
    for i, (r, p) in enumerate(zip(results, pairs)):
        stem = out / "pairs" / f"{i:04d}"
        _write(stem.with_suffix(".json"), dumps17(_pair_record(i, r, p)))
        save_mesh(str(stem) + "_adv.off", r.adversarial, curvature_distortion(r.adversarial, r.source).per_vertex)
        save_mesh(str(stem) + "_rec.off", r.reconstruction,
                  curvature_distortion(r.reconstruction, r.target).per_vertex)
    rep = campaign_report(results)
    summary = {"pairs": len(results), "delta_S_bar": rep.delta_S_bar, "delta_T_bar": rep.delta_T_bar}
    _write(out / "campaign.json", dumps17({"config": cfg, "summary": summary}))
    _write(out / "timing.json", dumps17(rep.timing))
    _write_config(out / "attack.config.json", cfg)
    return {"results": str(out), **summary}


def load_campaign(base: Path, results_dir: str):
    """Rebuild the AttackResults, the campaign record and the source meshes."""
    out = base / results_dir
    doc = json.loads(_read(out, "campaign.json", "campaign record"))
    cfg = doc["config"]
    man = _load_manifest(base, cfg["manifest"])
    meshes, labels = load_split(man, cfg["split"])
    results = []
    for i in range(doc["summary"]["pairs"]):
        stem = out / "pairs" / f"{i:04d}"
        rec = json.loads(_read(out / "pairs", f"{i:04d}.json", "pair record"))
        src, tgt = meshes[rec["source_index"]], meshes[rec["target_index"]]
        adv = read_mesh(str(stem) + "_adv.off")
        recon = read_mesh(str(stem) + "_rec.off")
        r = AttackResult(
            Mesh(adv.vertices, adv.faces, f"{src.name}->{tgt.name}:adv"),
            Mesh(recon.vertices, recon.faces, f"{src.name}->{tgt.name}:rec"),
            np.array(rec["B"]).reshape(-1, 3), rec["mode"], rec["k"],
            {k: np.array(v) for k, v in rec["traces"].items()}, 0.0, rec["delta_S"], rec["delta_T"],
            np.array(rec["source_coeffs_k"]).reshape(-1, 3) if "source_coeffs_k" in rec else None,
            rec["method"], {"source": rec["source"], "target": rec["target"],
                            "source_class": rec["source_class"], "target_class": rec["target_class"]},
            src, tgt)
        results.append(r)
    return results, cfg, man, meshes, labels


def cmd_train_detector(cfg: dict, base: Path) -> dict:
    results, *_ = load_campaign(base, cfg["results"])
    X = [r.source.vertices for r in results] + [r.adversarial.vertices for r in results]
    y = np.r_[np.zeros(len(results)), np.ones(len(results))].astype(np.int64)
    tc = TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], 0.0, cfg["seed"])
    model = train_detector(X, y, tc, select_best=False)
    out = base / cfg["out"]
    _write(out, save_model(model))
    _write_config(out.with_suffix(".config.json"), cfg)
    return {"checkpoint": str(out), "train_accuracy": model.training_meta["history"][-1]["train_acc"]}


def cmd_evaluate(cfg: dict, base: Path) -> dict:
    results, ccfg, man, meshes, labels = load_campaign(base, cfg["results"])
    clf = load_model(_read(base, cfg["classifier"], "classifier checkpoint"))
    ae = load_model(_read(base, ccfg["ae"], "autoencoder checkpoint"))
    rep = campaign_report(results, clf)
    doc = rep.to_dict()
    if cfg["detector_epochs"]:
        dcfg = TrainConfig(cfg["detector_epochs"], cfg["detector_batch_size"], cfg["detector_lr"], 0.0, cfg["seed"])
        det = detector_protocol([r.source.vertices for r in results], [r.adversarial.vertices for r in results],
                                [r.meta["source_class"] for r in results], dcfg)
        doc["detector_accuracy"] = det.mean_accuracy
        doc["detector_folds"] = det.folds
    if cfg["stability_iterations"]:
        doc["stability_targeted_accuracy"] = stability_accuracy(results, ae, cfg["stability_iterations"], clf)
    if cfg.get("transfer_ae"):
        other = load_model(_read(base, cfg["transfer_ae"], "transfer autoencoder checkpoint"))
        doc["transfer"] = transfer_attack(results, other, clf).to_dict()
    test, _ = load_split(man, "test")
    doc["ae_test_reconstruction_error"] = reconstruction_error(ae, np.stack([m.vertices.reshape(-1) for m in test]))
    out = Path(cfg["out"]) if cfg.get("out") else Path(cfg["results"]) / "report.json"
    _write(base / out, dumps17(doc))
    _write_config((base / out).with_suffix(".config.json"), cfg)
    return {"report": str(base / out), "targeted_accuracy": rep.targeted_accuracy,
            "untargeted_accuracy": rep.untargeted_accuracy, "detector_accuracy": doc.get("detector_accuracy")}


def cmd_analyze(cfg: dict, base: Path) -> dict:
    results, ccfg, man, meshes, labels = load_campaign(base, cfg["results"])
    out = base / cfg["results"]
    summary = {}
    if ccfg["method"] != "saga":
        raise UsageError("analyze needs a spectral (saga) campaign")
    basis = basis_from_json(_read(base, ccfg["basis"], "basis"))
    prof = spectral_profile(results, basis)
    _write(out / "profile.csv", prof.to_csv())
    lo, hi = prof.half_band_means()
    summary.update(profile=str(out / "profile.csv"), beta_lower_half=lo, beta_upper_half=hi)
    if cfg["sweep_pairs"]:
        ae = load_model(_read(base, ccfg["ae"], "autoencoder checkpoint"))
        acfg = AttackConfig.from_dict(ccfg["attack"])
        pairs = make_pairs(meshes, labels, ccfg["sources_per_class"], ccfg["targets"], ccfg["seed"])
        pairs = pairs[:cfg["sweep_pairs"]]
        rows = frequency_sweep(meshes, pairs, sorted(cfg["ks"]), acfg, basis, ae)
        _write(out / "sweep.csv", sweep_csv(rows))
        summary["sweep"] = str(out / "sweep.csv")
    _write_config(out / "analyze.config.json", cfg)
    return summary


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-classifier": cmd_train_classifier,
    "train-detector": cmd_train_detector,
    "shared-basis": cmd_shared_basis,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    base = Path(args.output_dir)
    t0 = time.perf_counter()
    try:
        cfg = resolve(args)
        # one BLAS thread per worker keeps reductions in a fixed order
        with _thread_limit(1):
            summary = HANDLERS[args.command](cfg, base)
    except (AttackError, NonFiniteError, SpectralError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"saga {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DatasetError, MeshError, CheckpointError, ValueError, OSError) as exc:
        print(f"saga {args.command}: {exc}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    print(dumps17(summary), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
