"""Geometric and semantic evaluation of attack campaigns."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .attack import AttackConfig, AttackResult, SourceGeometry, run_attack, run_euclidean_attack, select_target
from .mesh import Mesh, VertexScalarField, mean_curvature
from .nn import MlpModel, PointClassifier, TrainConfig, predict, train_detector
from .spectral import Projector, SpectralBasis

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CurvatureDistortionReport:
    per_vertex: VertexScalarField
    mean: float
    comparing: tuple


def curvature_distortion(x: Mesh, y: Mesh, signed: bool = False) -> CurvatureDistortionReport:
    """Mean over vertices of |H_x(i) - H_y(i)| for corresponding vertices."""
    if x.n != y.n:
        raise ValueError(f"vertex count mismatch: {x.n} vs {y.n}")
    d = np.abs(mean_curvature(x, signed).values - mean_curvature(y, signed).values)
    return CurvatureDistortionReport(VertexScalarField(d, x.name), float(d.mean()), (x.name, y.name))


@dataclass(frozen=True, eq=False)
class SpectralMagnitudeProfile:
    alpha: np.ndarray
    beta: np.ndarray
    averaged_over: int

    def half_band_means(self) -> tuple[float, float]:
        """Mean of beta over the lower and upper halves of the perturbed band."""
        h = len(self.beta) // 2
        return float(self.beta[:h].mean()), float(self.beta[h:].mean())

    def to_csv(self) -> str:
        rows = ["i,alpha_bar,beta_bar"]
        rows += [f"{i},{a:.17g},{b:.17g}" for i, (a, b) in enumerate(zip(self.alpha, self.beta))]
        return "\n".join(rows) + "\n"


def spectral_profile(results: Sequence[AttackResult], basis: Optional[SpectralBasis] = None) -> SpectralMagnitudeProfile:
    """Per-frequency row norms of the source coefficients and of B, averaged over pairs."""
    if not results:
        raise ValueError("no results")
    ks = {r.k for r in results}
    if len(ks) != 1 or any(r.method != "saga" for r in results):
        raise ValueError("all results must be spectral attacks with the same k")
    k = ks.pop()
    alpha = np.zeros(k)
    beta = np.zeros(k)
    for r in results:
        if r.source_coeffs is None:
            if basis is None or r.source is None:
                raise ValueError("source coefficients unavailable; pass the basis")
            r.source_coeffs = Projector(basis).solve(r.source.vertices)
        alpha += np.linalg.norm(r.source_coeffs[:k], axis=1)
        beta += np.linalg.norm(r.B, axis=1)
    return SpectralMagnitudeProfile(alpha / len(results), beta / len(results), len(results))


def _labels(results) -> tuple[np.ndarray, np.ndarray]:
    s = np.array([r.meta["source_class"] for r in results])
    t = np.array([r.meta["target_class"] for r in results])
    return s, t


def classify_reconstructions(results: Sequence[AttackResult], classifier: PointClassifier,
                             reconstructions: Optional[Sequence[np.ndarray]] = None):
    """(targeted, untargeted, predicted labels) for the adversarial reconstructions."""
    s, t = _labels(results)
    if np.any(s == t):
        raise ValueError("every pair needs different source and target classes")
    if max(s.max(), t.max()) >= classifier.n_classes:
        raise ValueError("classifier was trained on a different class set")
    recs = reconstructions if reconstructions is not None else [r.reconstruction.vertices for r in results]
    pred = classifier.predict(np.stack(recs))
    return float(np.mean(pred == t)), float(np.mean(pred != s)), pred


@dataclass
class CampaignReport:
    targeted_accuracy: float
    untargeted_accuracy: float
    delta_S_bar: float
    delta_T_bar: float
    records: list
    detector_accuracy: Optional[float] = None
    timing: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "targeted_accuracy": self.targeted_accuracy,
            "untargeted_accuracy": self.untargeted_accuracy,
            "detector_accuracy": self.detector_accuracy,
            "delta_S_bar": self.delta_S_bar,
            "delta_T_bar": self.delta_T_bar,
            "records": self.records,
            "extra": self.extra,
        }
        if include_timing:
            d["timing"] = self.timing
        return d


def campaign_report(results: Sequence[AttackResult], classifier: Optional[PointClassifier] = None,
                    reconstructions=None, delta_T=None) -> CampaignReport:
    dS = np.array([r.delta_S for r in results])
    dT = np.array(delta_T if delta_T is not None else [r.delta_T for r in results])
    preds = [None] * len(results)
    tacc = uacc = float("nan")
    if classifier is not None:
        tacc, uacc, preds = classify_reconstructions(results, classifier, reconstructions)
    records = []
    for r, p, ds, dt in zip(results, preds, dS, dT):
        records.append({
            "source": r.meta.get("source"), "target": r.meta.get("target"),
            "source_class": r.meta.get("source_class"), "target_class": r.meta.get("target_class"),
            "method": r.method, "predicted": None if p is None else int(p),
            "delta_S": float(ds), "delta_T": float(dt),
            "final_recon": float(r.traces["recon"][-1]) if "recon" in r.traces else None,
        })
    times = np.array([r.wall_time for r in results])
    timing = {"mean_s": float(times.mean()), "max_s": float(times.max()), "total_s": float(times.sum())}
    return CampaignReport(tacc, uacc, float(dS.mean()), float(dT.mean()), records, timing=timing)


# ---------------------------------------------------------------------------
# campaigns

@dataclass(frozen=True)
class Pair:
    source: int
    target: int
    source_class: int
    target_class: int


def make_pairs(meshes: Sequence[Mesh], labels, sources_per_class: int, selection: str = "nearest",
               seed: int = 0) -> list[Pair]:
    """The first ``sources_per_class`` meshes of each class, each paired with one
    target from every other class (nearest neighbour or seeded random)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rng = np.random.default_rng([seed, 31337])
    pairs = []
    for c in classes:
        src = np.flatnonzero(labels == c)[:sources_per_class]
        for s in src:
            for tc in classes:
                if tc == c:
                    continue
                pool = np.flatnonzero(labels == tc)
                if selection == "nearest":
                    t = pool[select_target(meshes[s], [meshes[i] for i in pool])]
                elif selection == "random":
                    t = pool[rng.integers(len(pool))]
                else:
                    raise ValueError(f"unknown target selection {selection!r}")
                pairs.append(Pair(int(s), int(t), int(c), int(tc)))
    return pairs


def run_campaign(meshes: Sequence[Mesh], pairs: Sequence[Pair], ae: MlpModel, config: AttackConfig,
                 basis: Optional[SpectralBasis] = None, method: str = "saga", threads: int = 1,
                 progress: Optional[Callable] = None) -> list[AttackResult]:
    """Attack every pair; results keep the pair order whatever the thread count."""
    projector = Projector(basis) if method == "saga" else None
    coeffs: dict = {}
    geos: dict = {}
    for p in pairs:
        if p.source not in geos:
            geos[p.source] = SourceGeometry(meshes[p.source])
            if projector is not None:
                coeffs[p.source] = projector.solve(meshes[p.source].vertices)

    def one(p: Pair) -> AttackResult:
        src, tgt = meshes[p.source], meshes[p.target]
        if method == "saga":
            r = run_attack(src, tgt, basis, ae, config, coeffs[p.source], geo=geos[p.source])
        elif method == "euclidean":
            r = run_euclidean_attack(src, tgt, ae, config, geo=geos[p.source])
        else:
            raise ValueError(f"unknown attack method {method!r}")
        r.meta.update(source_class=p.source_class, target_class=p.target_class,
                      source_index=p.source, target_index=p.target)
        if progress:
            progress(r)
        return r

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, pairs))
    return [one(p) for p in pairs]


# ---------------------------------------------------------------------------
# detector

@dataclass
class DetectorReport:
    mean_accuracy: float
    folds: list


def detector_protocol(clean: Sequence[np.ndarray], adversarial: Sequence[np.ndarray], classes,
                      config: TrainConfig, shuffle_labels: bool = False) -> DetectorReport:
    """Leave-one-class-out clean/adversarial detection.

    ``clean[i]`` and ``adversarial[i]`` form pair i of semantic class
    ``classes[i]``.  For each class c a detector is trained on the pairs of
    every other class; the pairs of c are shuffled (seeded) and split by index
    parity into validation (even) and test (odd).  Returns the mean test
    accuracy over classes.
    """
    classes = np.asarray(classes)
    clean = np.stack([np.asarray(c).reshape(-1) for c in clean])
    adv = np.stack([np.asarray(a).reshape(-1) for a in adversarial])
    uniq = np.unique(classes)
    folds = []
    for c in uniq:
        held = np.flatnonzero(classes == c)
        if held.size < 4:
            raise ValueError(f"class {c} has only {held.size} pairs; need at least 4")
        train = np.flatnonzero(classes != c)
        rng = np.random.default_rng([config.seed, int(c)])
        held = held[rng.permutation(held.size)]
        val, test = held[0::2], held[1::2]

        def stack(idx):
            X = np.concatenate([clean[idx], adv[idx]])
            y = np.concatenate([np.zeros(len(idx), np.int64), np.ones(len(idx), np.int64)])
            return X, y

        Xtr, ytr = stack(train)
        Xv, yv = stack(val)
        Xte, yte = stack(test)
        if shuffle_labels:
            srng = np.random.default_rng([config.seed, int(c), 1])
            ytr, yv, yte = srng.permutation(ytr), srng.permutation(yv), srng.permutation(yte)
        model = train_detector(Xtr, ytr, replace(config, seed=config.seed + int(c)), Xv, yv)
        acc = float(np.mean(predict(model, Xte) == yte))
        folds.append({"held_out": int(c), "test_accuracy": acc,
                      "best_epoch": model.training_meta.get("best_epoch"),
                      "n_train": int(len(ytr)), "n_test": int(len(yte))})
        log.info("detector fold %d: test accuracy %.3f", c, acc)
    return DetectorReport(float(np.mean([f["test_accuracy"] for f in folds])), folds)


# ---------------------------------------------------------------------------
# transfer, stability, sweeps

def transfer_attack(results: Sequence[AttackResult], other_ae: MlpModel,
                    classifier: Optional[PointClassifier] = None) -> CampaignReport:
    """Feed the stored adversarial meshes to a different autoencoder."""
    n3 = results[0].adversarial.n * 3
    if other_ae.dims[0] != n3:
        raise ValueError(f"autoencoder expects {other_ae.dims[0]} inputs, meshes give {n3}")
    recs, dT = [], []
    for r in results:
        V = other_ae(r.adversarial.vertices.reshape(1, -1)).reshape(-1, 3)
        recs.append(V)
        dT.append(curvature_distortion(Mesh(V, r.adversarial.faces), r.target).mean)
    return campaign_report(results, classifier, recs, dT)


@dataclass
class StabilityTrace:
    meshes: list
    labels: list


def stability_iterate(result: AttackResult, ae, iterations: int,
                      classifier: Optional[PointClassifier] = None) -> StabilityTrace:
    """Chain reconstructions: first ae(M_adv), then ae of the previous output."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    V = result.adversarial.vertices
    meshes, labels = [], []
    for _ in range(iterations):
        V = np.asarray(ae(V.reshape(1, -1))).reshape(-1, 3)
        meshes.append(Mesh(V, result.adversarial.faces))
        if classifier is not None:
            labels.append(int(classifier.predict(V[None])[0]))
    return StabilityTrace(meshes, labels)


def stability_accuracy(results: Sequence[AttackResult], ae, iterations: int,
                       classifier: PointClassifier) -> list[float]:
    """Targeted accuracy after each reconstruction iteration."""
    _, t = _labels(results)
    labels = np.array([stability_iterate(r, ae, iterations, classifier).labels for r in results])
    return [float(np.mean(labels[:, i] == t)) for i in range(iterations)]


def frequency_sweep(meshes: Sequence[Mesh], pairs: Sequence[Pair], ks: Sequence[int], config: AttackConfig,
                    basis: SpectralBasis, ae: MlpModel) -> list[tuple[int, float, float]]:
    """(k, mean delta_S, mean delta_T) for a full campaign at each band size."""
    if list(ks) != sorted(ks):
        raise ValueError("ks must be ascending")
    rows = []
    for k in ks:
        res = run_campaign(meshes, pairs, ae, replace(config, k=int(k)), basis)
        rows.append((int(k), float(np.mean([r.delta_S for r in res])), float(np.mean([r.delta_T for r in res]))))
        log.info("sweep k=%d dS=%.4g dT=%.4g", *rows[-1])
    return rows


def sweep_csv(rows) -> str:
    return "k,delta_S_bar,delta_T_bar\n" + "".join(f"{k},{s:.17g},{t:.17g}\n" for k, s, t in rows)
