"""End-to-end training, feature generation, and evaluation plumbing.

Ties together image decoding, plane preprocessing, the two transform trees,
pair features, and the classifier stack. Feature generation is fully
unsupervised (transforms, response stats, scalers), so the same fitted
featurizer serves both classifier training and label-free query loops.
Transform outputs are computed once per unique image and shared across every
pair that references it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import classify, pairfeat, pixelhop, preprocess
from .dataio import FacePair, ImageStore, augment_flip, kfold_split
from .errors import DataError

# Energy thresholds reproducing the published operating point; E_C = E_F
# eliminates leaf nodes below the last level.
DEFAULT_EC_Y = 0.0005
DEFAULT_EC_CRCB = 0.0004


@dataclass(frozen=True)
class TrainSettings:
    ec_y: float = DEFAULT_EC_Y
    ef_y: float = DEFAULT_EC_Y
    ec_crcb: float = DEFAULT_EC_CRCB
    ef_crcb: float = DEFAULT_EC_CRCB
    patch_subsample: float = 1.0
    seed: int = 0
    augment: bool = False
    low_resolution: int | None = None


@dataclass
class PairFeaturizer:
    """Unsupervised half of the model: transforms, stats, and scalers."""

    submodel_y: classify.Submodel
    submodel_crcb: classify.Submodel
    settings: TrainSettings

    def plane_cache(self, pairs: list[FacePair], store: ImageStore):
        return _plane_cache(pairs, store, self.settings)

    def submodel_features(self, tag: str, pairs: list[FacePair], store: ImageStore, planes=None):
        """Min-max-scaled pair features of one submodel for arbitrary pairs."""
        sub = self.submodel_y if tag == "y" else self.submodel_crcb
        channel = 0 if tag == "y" else 1
        planes = planes if planes is not None else self.plane_cache(pairs, store)
        outputs = {key: pixelhop.apply_pixelhop(sub.hop, pl[channel]) for key, pl in planes.items()}
        return sub.scaler.transform(_raw_features(outputs, sub.stats, sub.layout, pairs))

    def features(self, pairs: list[FacePair], store: ImageStore) -> np.ndarray:
        """Concatenated scaled [Y | CrCb] pair features (label-free)."""
        planes = self.plane_cache(pairs, store)
        return np.hstack(
            [self.submodel_features(tag, pairs, store, planes=planes) for tag in ("y", "crcb")]
        )


def _plane_cache(pairs: list[FacePair], store: ImageStore, settings: TrainSettings):
    """Preprocess every unique image referenced by the pairs, once."""
    planes: dict[tuple[str, bool], tuple[np.ndarray, np.ndarray]] = {}
    for pair in pairs:
        for ref in (pair.image_a, pair.image_b):
            if ref.key not in planes:
                planes[ref.key] = preprocess.preprocess_image(
                    store.get(ref), low_resolution=settings.low_resolution
                )
    return planes


def _raw_features(sub_outputs, stats, layout, pairs) -> np.ndarray:
    feats = np.empty((len(pairs), layout.n_features))
    for i, pair in enumerate(pairs):
        feats[i] = pairfeat.extract_pair_feature(
            sub_outputs[pair.image_a.key], sub_outputs[pair.image_b.key], stats, layout
        )
    return feats


def _labels(pairs: list[FacePair]) -> np.ndarray:
    labels = [p.label for p in pairs]
    if any(l is None for l in labels):
        raise DataError("training pairs must all be labeled")
    return np.asarray(labels, dtype=int)


def fit_featurizer(
    pairs: list[FacePair],
    store: ImageStore,
    settings: TrainSettings | None = None,
) -> tuple[PairFeaturizer, dict[str, np.ndarray]]:
    """Fit transforms, response stats, and scalers on the given pairs.

    Returns the featurizer plus the scaled features of the fitting pairs per
    submodel tag, so callers that immediately train classifiers do not pay
    for a second pass.
    """
    settings = settings or TrainSettings()
    planes = _plane_cache(pairs, store, settings)
    keys = list(planes.keys())

    submodels = {}
    fitted_features = {}
    for tag, channel, (ec, ef), k0 in (
        ("y", 0, (settings.ec_y, settings.ef_y), 1),
        ("crcb", 1, (settings.ec_crcb, settings.ef_crcb), 2),
    ):
        config = pixelhop.PixelHopConfig(
            input_channels=k0,
            e_cutoff=ec,
            e_forward=ef,
            patch_subsample=settings.patch_subsample,
            subsample_seed=settings.seed,
        )
        stack = np.stack([planes[k][channel] for k in keys])
        hop = pixelhop.fit_pixelhop(stack, config)
        outputs = {key: pixelhop.apply_pixelhop(hop, pl[channel]) for key, pl in planes.items()}
        stats = pairfeat.fit_stats(outputs[k] for k in keys)
        layout = pairfeat.FeatureLayout.for_model(hop)
        feats = _raw_features(outputs, stats, layout, pairs)
        scaler = classify.MinMaxScaler.fit(feats)
        submodels[tag] = classify.Submodel(
            hop=hop, stats=stats, layout=layout, scaler=scaler, classifier=None
        )
        fitted_features[tag] = scaler.transform(feats)
    featurizer = PairFeaturizer(
        submodel_y=submodels["y"], submodel_crcb=submodels["crcb"], settings=settings
    )
    return featurizer, fitted_features


def train_verification_model(
    pairs: list[FacePair],
    store: ImageStore,
    settings: TrainSettings | None = None,
) -> classify.VerificationModel:
    """Fit both submodels and the meta classifier from labeled pairs.

    One-pass feedforward: transforms are fitted on the unique training
    images, response statistics and pair features follow, and only the three
    logistic models involve iterative optimization.
    """
    settings = settings or TrainSettings()
    if settings.augment:
        pairs = augment_flip(pairs)
    labels = _labels(pairs)
    featurizer, feats = fit_featurizer(pairs, store, settings)

    probs = {}
    for tag, sub in (("y", featurizer.submodel_y), ("crcb", featurizer.submodel_crcb)):
        sub.classifier = classify.train_logistic(feats[tag], labels)
        probs[tag] = classify.predict_proba(sub.classifier, feats[tag])
    meta = classify.train_logistic(np.column_stack([probs["y"], probs["crcb"]]), labels)
    return classify.VerificationModel(
        submodel_y=featurizer.submodel_y, submodel_crcb=featurizer.submodel_crcb, meta=meta
    )


def featurizer_from_model(
    model: classify.VerificationModel, settings: TrainSettings | None = None
) -> PairFeaturizer:
    """View a trained verification model as its unsupervised featurizer."""
    return PairFeaturizer(
        submodel_y=model.submodel_y,
        submodel_crcb=model.submodel_crcb,
        settings=settings or TrainSettings(),
    )


def pair_probabilities(
    model: classify.VerificationModel,
    pairs: list[FacePair],
    store: ImageStore,
    settings: TrainSettings | None = None,
) -> np.ndarray:
    """Ensemble match probability for each pair, sharing per-image outputs."""
    settings = settings or TrainSettings()
    planes = _plane_cache(pairs, store, settings)
    outs = {
        key: (
            pixelhop.apply_pixelhop(model.submodel_y.hop, pl[0]),
            pixelhop.apply_pixelhop(model.submodel_crcb.hop, pl[1]),
        )
        for key, pl in planes.items()
    }
    probs = np.empty(len(pairs))
    for i, pair in enumerate(pairs):
        probs[i], _ = classify.verify_outputs(model, outs[pair.image_a.key], outs[pair.image_b.key])
    return probs


def verification_accuracy(
    model: classify.VerificationModel,
    pairs: list[FacePair],
    store: ImageStore,
    settings: TrainSettings | None = None,
) -> float:
    probs = pair_probabilities(model, pairs, store, settings)
    labels = _labels(pairs)
    return float(np.mean((probs >= 0.5).astype(int) == labels))


def cross_validate(
    protocol,
    store: ImageStore,
    settings: TrainSettings | None = None,
    progress=None,
) -> list[float]:
    """Held-out-fold accuracy for every fold of a pairs protocol.

    The full pipeline (transforms included) is refitted on the training side
    of each split, so no held-out image influences any fitted statistic.
    """
    settings = settings or TrainSettings()
    accuracies = []
    for fold in range(protocol.n_folds):
        train_pairs, test_pairs = kfold_split(protocol, fold)
        model = train_verification_model(train_pairs, store, settings)
        acc = verification_accuracy(model, test_pairs, store, settings)
        accuracies.append(acc)
        if progress is not None:
            progress(fold, acc)
    return accuracies
