"""Classifiers and the two-submodel verification ensemble.

Logistic regression is the primary pair classifier (trained by deterministic
full-batch gradient descent with backtracking line search); a linear SVM is
provided as the second committee member for disagreement-based querying. One
submodel per color representation (Y, CrCb) feeds a tiny meta classifier that
combines the two match probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pairfeat, pixelhop, preprocess
from .container import read_container, write_container
from .errors import DataError, FitError, ModelIOError

LOGISTIC = "logistic"
LINEAR_SVM = "linear_svm"


@dataclass
class TrainConfig:
    l2: float | None = None  # None -> 1/n_samples
    max_iter: int = 500
    tol: float = 1e-6


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    kind: str
    l2: float = 0.0
    loss_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def n_parameters(self) -> int:
        return self.weights.size + 1

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.weights.size:
            raise DataError(f"feature dim {x.shape[1]} does not match model dim {self.weights.size}")
        return x @ self.weights + self.bias


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    z = x @ w + b
    # log(1 + exp(-z)) and log(1 + exp(z)) without overflow
    nll = np.mean((1 - y) * np.logaddexp(0.0, z) + y * np.logaddexp(0.0, -z))
    return float(nll + 0.5 * l2 * np.dot(w, w))


def logistic_gradient(
    w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float
) -> tuple[np.ndarray, float]:
    p = _sigmoid(x @ w + b)
    err = p - y
    return x.T @ err / len(y) + l2 * w, float(err.mean())


def hinge_loss(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    margins = (2.0 * y - 1.0) * (x @ w + b)
    return float(np.mean(np.maximum(0.0, 1.0 - margins)) + 0.5 * l2 * np.dot(w, w))


def hinge_gradient(
    w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float
) -> tuple[np.ndarray, float]:
    ys = 2.0 * y - 1.0
    active = ys * (x @ w + b) < 1.0
    coeff = -ys * active
    return x.T @ coeff / len(y) + l2 * w, float(coeff.mean())


def _validate_training_data(features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise FitError("features must be (n, d) with one label per row")
    if not np.all(np.isfinite(x)):
        raise FitError("non-finite feature values")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise FitError("labels must be 0/1")
    if len(np.unique(y)) < 2:
        raise FitError("training data contains a single class")
    return x, y


def train_logistic(features, labels, config: TrainConfig | None = None) -> LinearModel:
    """L2-regularized logistic regression from zero init.

    Full-batch gradient descent with Armijo backtracking; the recorded loss
    trace is non-increasing. Deterministic: same data, same model.
    """
    cfg = config or TrainConfig()
    x, y = _validate_training_data(features, labels)
    l2 = cfg.l2 if cfg.l2 is not None else 1.0 / len(y)
    w = np.zeros(x.shape[1])
    b = 0.0
    loss = logistic_loss(w, b, x, y, l2)
    trace = [loss]
    step = 1.0
    for _ in range(cfg.max_iter):
        gw, gb = logistic_gradient(w, b, x, y, l2)
        gnorm2 = float(np.dot(gw, gw) + gb * gb)
        if np.sqrt(gnorm2) <= cfg.tol:
            break
        step = min(step * 2.0, 1e4)  # allow growth after cautious iterations
        while step >= 1e-12:
            new_loss = logistic_loss(w - step * gw, b - step * gb, x, y, l2)
            if new_loss <= loss - 1e-4 * step * gnorm2:
                break
            step *= 0.5
        else:
            break  # no descent step exists at float precision
        w -= step * gw
        b -= step * gb
        loss = new_loss
        trace.append(loss)
    return LinearModel(weights=w, bias=b, kind=LOGISTIC, l2=l2, loss_trace=trace)


def train_linear_svm(features, labels, config: TrainConfig | None = None) -> LinearModel:
    """Hinge-loss + L2 linear classifier via full-batch subgradient descent.

    Steps decay as 1/(l2 * t); the iterate with the lowest objective is kept,
    which makes the result deterministic and near-optimal on the small
    problems this committee member sees.
    """
    cfg = config or TrainConfig()
    x, y = _validate_training_data(features, labels)
    l2 = cfg.l2 if cfg.l2 is not None else 1.0 / len(y)
    w = np.zeros(x.shape[1])
    b = 0.0
    best = (hinge_loss(w, b, x, y, l2), w.copy(), b)
    max_iter = max(cfg.max_iter, 1000)
    for t in range(1, max_iter + 1):
        gw, gb = hinge_gradient(w, b, x, y, l2)
        step = 1.0 / (l2 * t)
        w -= step * gw
        b -= step * gb
        obj = hinge_loss(w, b, x, y, l2)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    return LinearModel(weights=best[1], bias=best[2], kind=LINEAR_SVM, l2=l2, loss_trace=[best[0]])


def predict_proba(model: LinearModel, features) -> np.ndarray:
    """Match probability sigma(w.x + b), clipped into the open interval (0, 1)."""
    if model.kind != LOGISTIC:
        raise DataError("predict_proba is defined for logistic models only")
    p = _sigmoid(model.scores(features))
    return np.clip(p, 1e-12, 1.0 - 1e-12)


def predict_label(model: LinearModel, features) -> np.ndarray:
    """Hard 0/1 decision: probability >= 0.5 for LR, score sign for SVM."""
    return (model.scores(features) >= 0.0).astype(int)


@dataclass
class MinMaxScaler:
    """Per-dimension min-max scaling to [0, 1] using training extremes."""

    mins: np.ndarray
    ranges: np.ndarray  # zero for constant dimensions

    @classmethod
    def fit(cls, features: np.ndarray) -> "MinMaxScaler":
        x = np.asarray(features, dtype=np.float64)
        mins = x.min(axis=0)
        ranges = x.max(axis=0) - mins
        return cls(mins=mins, ranges=ranges)

    def transform(self, features: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        safe = np.where(self.ranges > 0, self.ranges, 1.0)
        out = (x - self.mins) / safe
        return np.where(self.ranges > 0, out, 0.0)


@dataclass
class Submodel:
    """Transform tree + response stats + scaler + pair classifier for one plane.

    The classifier slot is None while the unsupervised half is used on its
    own (feature generation for query loops).
    """

    hop: pixelhop.PixelHopModel
    stats: pairfeat.ChannelStats
    layout: pairfeat.FeatureLayout
    scaler: MinMaxScaler
    classifier: LinearModel | None = None

    def pair_feature(self, out_a: pixelhop.HopOutputs, out_b: pixelhop.HopOutputs) -> np.ndarray:
        return pairfeat.extract_pair_feature(out_a, out_b, self.stats, self.layout)

    def pair_probability(self, out_a: pixelhop.HopOutputs, out_b: pixelhop.HopOutputs) -> float:
        if self.classifier is None:
            raise DataError("submodel has no trained classifier")
        feat = self.scaler.transform(self.pair_feature(out_a, out_b))
        return float(predict_proba(self.classifier, feat)[0])


@dataclass
class VerificationModel:
    submodel_y: Submodel
    submodel_crcb: Submodel
    meta: LinearModel

    def planes(self, rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return preprocess.preprocess_image(rgb)

    def outputs(self, y_plane: np.ndarray, crcb_plane: np.ndarray):
        return (
            pixelhop.apply_pixelhop(self.submodel_y.hop, y_plane),
            pixelhop.apply_pixelhop(self.submodel_crcb.hop, crcb_plane),
        )


def verify_outputs(
    model: VerificationModel,
    a: tuple[pixelhop.HopOutputs, pixelhop.HopOutputs],
    b: tuple[pixelhop.HopOutputs, pixelhop.HopOutputs],
) -> tuple[float, bool]:
    """Ensemble decision from precomputed (Y, CrCb) transform outputs."""
    p_y = model.submodel_y.pair_probability(a[0], b[0])
    p_crcb = model.submodel_crcb.pair_probability(a[1], b[1])
    p = float(predict_proba(model.meta, np.array([[p_y, p_crcb]]))[0])
    return p, p >= 0.5


def verify(model: VerificationModel, img_a: np.ndarray, img_b: np.ndarray) -> tuple[float, bool]:
    """Match probability and decision for two aligned RGB face images.

    Symmetric in its two arguments: the pair feature depends only on the
    unordered pair.
    """
    a = model.outputs(*model.planes(img_a))
    b = model.outputs(*model.planes(img_b))
    return verify_outputs(model, a, b)


def identify(
    model: VerificationModel,
    gallery: list[tuple[str, np.ndarray]],
    probe: np.ndarray,
) -> list[tuple[str, float]]:
    """Rank gallery identities against a probe image.

    ``gallery`` holds (identity, image) entries; an identity's score is the
    maximum verify probability over its images. Ties keep first-appearance
    identity order. The first element is the rank-1 match.
    """
    if not gallery:
        raise DataError("identify needs a non-empty gallery")
    probe_out = model.outputs(*model.planes(probe))
    order: list[str] = []
    scores: dict[str, float] = {}
    for identity, img in gallery:
        p, _ = verify_outputs(model, probe_out, model.outputs(*model.planes(img)))
        if identity not in scores:
            order.append(identity)
            scores[identity] = p
        else:
            scores[identity] = max(scores[identity], p)
    ranked = sorted(order, key=lambda ident: -scores[ident])
    return [(ident, scores[ident]) for ident in ranked]


# ---------------------------------------------------------------------------
# serialization of the full ensemble


def _linear_to_payload(model: LinearModel, prefix: str, meta: dict, arrays: dict) -> None:
    meta[prefix] = {"kind": model.kind, "bias": model.bias, "l2": model.l2}
    arrays[f"{prefix}/weights"] = model.weights


def _linear_from_payload(prefix: str, meta: dict, arrays: dict) -> LinearModel:
    m = meta[prefix]
    return LinearModel(weights=arrays[f"{prefix}/weights"], bias=m["bias"], kind=m["kind"], l2=m["l2"])


def save_verification_model(model: VerificationModel, path) -> None:
    meta: dict = {}
    arrays: dict[str, np.ndarray] = {}
    for tag, sub in (("y", model.submodel_y), ("crcb", model.submodel_crcb)):
        hop_meta, hop_arrays = pixelhop.model_to_payload(sub.hop, prefix=f"{tag}/")
        meta[f"{tag}/hop"] = hop_meta
        arrays.update(hop_arrays)
        for lv in (1, 2, 3):
            mean, std = sub.stats.for_level(lv)
            arrays[f"{tag}/stats/mean{lv}"] = mean
            arrays[f"{tag}/stats/std{lv}"] = std
        arrays[f"{tag}/scaler/mins"] = sub.scaler.mins
        arrays[f"{tag}/scaler/ranges"] = sub.scaler.ranges
        _linear_to_payload(sub.classifier, f"{tag}/classifier", meta, arrays)
        meta[f"{tag}/layout"] = [sub.layout.k1, sub.layout.k2, sub.layout.k3]
    _linear_to_payload(model.meta, "meta_classifier", meta, arrays)
    write_container(path, "verification", meta, arrays)


def load_verification_model(path) -> VerificationModel:
    kind, meta, arrays = read_container(path)
    if kind != "verification":
        raise ModelIOError(f"{path}: container holds {kind!r}, not a verification model")
    subs = {}
    for tag in ("y", "crcb"):
        hop = pixelhop.model_from_payload(meta[f"{tag}/hop"], arrays, prefix=f"{tag}/")
        stats = pairfeat.ChannelStats(
            level1_mean=arrays[f"{tag}/stats/mean1"],
            level1_std=arrays[f"{tag}/stats/std1"],
            level2_mean=arrays[f"{tag}/stats/mean2"],
            level2_std=arrays[f"{tag}/stats/std2"],
            level3_mean=arrays[f"{tag}/stats/mean3"],
            level3_std=arrays[f"{tag}/stats/std3"],
        )
        k1, k2, k3 = meta[f"{tag}/layout"]
        subs[tag] = Submodel(
            hop=hop,
            stats=stats,
            layout=pairfeat.FeatureLayout(k1=k1, k2=k2, k3=k3),
            scaler=MinMaxScaler(mins=arrays[f"{tag}/scaler/mins"], ranges=arrays[f"{tag}/scaler/ranges"]),
            classifier=_linear_from_payload(f"{tag}/classifier", meta, arrays),
        )
    return VerificationModel(
        submodel_y=subs["y"],
        submodel_crcb=subs["crcb"],
        meta=_linear_from_payload("meta_classifier", meta, arrays),
    )
