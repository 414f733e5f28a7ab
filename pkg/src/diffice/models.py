"""Guiding quality classifier f(x) = l(s(x), x), the independent oracle, and feature extractors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import synthdata as sd
from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)

N_SEG = len(sd.CLASSES)
ORACLE_HEADS = ("QS_O", "QS_TH", "QS_CSP", "QS_FP")


def as_batch(x, dtype=None) -> np.ndarray:
    """Accept (H, W), (N, H, W) or (N, H, W, 1) images and return NHWC."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[1:] != (sd.H, sd.W, 1):
        raise ShapeError(f"expected images of shape ({sd.H}, {sd.W}), got {x.shape}")
    return x.astype(dtype or (x.dtype if x.dtype in (np.float32, np.float64) else np.float32), copy=False)


def _as_tensor_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.ndim != 4 or x.shape[1:] != (sd.H, sd.W, 1):
            raise ShapeError(f"expected images of shape (N, {sd.H}, {sd.W}, 1), got {x.shape}")
        return x
    return Tensor(as_batch(x))


# -- networks -------------------------------------------------------------------
class Segmenter(nn.Module):
    """3-level U-Net producing per-pixel logits over background/skull/TH/CSP/FP."""

    def __init__(self, rng, widths=(8, 16, 32), dtype=np.float32):
        c1, c2, c3 = widths
        self.e1a = nn.Conv2d(1, c1, 3, rng, dtype=dtype)
        self.e1b = nn.Conv2d(c1, c1, 3, rng, dtype=dtype)
        self.e2a = nn.Conv2d(c1, c2, 3, rng, dtype=dtype)
        self.e2b = nn.Conv2d(c2, c2, 3, rng, dtype=dtype)
        self.ma = nn.Conv2d(c2, c3, 3, rng, dtype=dtype)
        self.mb = nn.Conv2d(c3, c3, 3, rng, dtype=dtype)
        self.u2 = nn.Conv2d(c3 + c2, c2, 3, rng, dtype=dtype)
        self.u1 = nn.Conv2d(c2 + c1, c1, 3, rng, dtype=dtype)
        self.head = nn.Conv2d(c1, N_SEG, 1, rng, gain=0.5, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h1 = T.relu(self.e1b(T.relu(self.e1a(x))))
        h2 = T.relu(self.e2b(T.relu(self.e2a(T.avg_pool2d(h1)))))
        h = T.relu(self.mb(T.relu(self.ma(T.avg_pool2d(h2)))))
        h = T.relu(self.u2(T.concat([T.upsample_nearest(h), h2], axis=-1)))
        h = T.relu(self.u1(T.concat([T.upsample_nearest(h), h1], axis=-1)))
        return self.head(h)


class ConvTrunk(nn.Module):
    """conv-pool-conv-pool-conv followed by global average pooling."""

    def __init__(self, cin: int, widths, rng, dtype=np.float32):
        c1, c2, c3 = widths
        self.c1 = nn.Conv2d(cin, c1, 3, rng, dtype=dtype)
        self.c2 = nn.Conv2d(c1, c2, 3, rng, dtype=dtype)
        self.c3 = nn.Conv2d(c2, c3, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.avg_pool2d(T.relu(self.c1(x)))
        h = T.avg_pool2d(T.relu(self.c2(h)))
        return nn.global_avg_pool(T.relu(self.c3(h)))


class Predictor(nn.Module):
    """Four-layer convnet on [segmentation probabilities, image] -> (NSP, SP) logits."""

    def __init__(self, rng, widths=(16, 32, 32), dtype=np.float32):
        self.trunk = ConvTrunk(N_SEG + 1, widths, rng, dtype)
        self.fc = nn.Linear(widths[2], 2, rng, gain=0.05, dtype=dtype)

    def __call__(self, seg_probs: Tensor, x: Tensor) -> Tensor:
        return self.fc(self.trunk(T.concat([seg_probs, x], axis=-1)))


class QualityClassifier(nn.Module):
    def __init__(self, rng, seg_widths=(8, 16, 32), pred_widths=(16, 32, 32), dtype=np.float32):
        self.segmenter = Segmenter(rng, seg_widths, dtype)
        self.predictor = Predictor(rng, pred_widths, dtype)

    def seg_logits(self, x: Tensor) -> Tensor:
        return self.segmenter(x)

    def logits(self, x) -> Tensor:
        x = _as_tensor_batch(x)
        probs = T.softmax(self.segmenter(x), axis=-1)
        return self.predictor(probs, x)

    __call__ = logits


def classify(f: QualityClassifier, x) -> tuple[np.ndarray, np.ndarray]:
    """SP probability per image and the argmax segmentation."""
    xb = as_batch(x, np.float32 if f.predictor.fc.weight.dtype == np.float32 else np.float64)
    with no_grad():
        seg = f.segmenter(Tensor(xb))
        probs = T.softmax(seg, axis=-1)
        p = T.softmax(f.predictor(probs, Tensor(xb)), axis=-1).data[:, sd.SP]
    return p, seg.data.argmax(axis=-1).astype(np.uint8)


class Oracle(nn.Module):
    """Independent scorer: overall SP head plus TH/CSP/FP concept heads."""

    def __init__(self, rng, widths=(12, 24, 48), dtype=np.float32):
        self.trunk = ConvTrunk(1, widths, rng, dtype)
        self.hidden = nn.Linear(widths[2], 32, rng, dtype=dtype)
        self.heads = nn.Linear(32, len(ORACLE_HEADS), rng, gain=0.1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.heads(T.relu(self.hidden(self.trunk(x))))


# oracle head -> concept column of the training targets (overall uses the SP label)
_ORACLE_TARGETS = {"QS_TH": sd.CONCEPTS.index("th_present"), "QS_CSP": sd.CONCEPTS.index("csp_present"),
                   "QS_FP": sd.CONCEPTS.index("fp_absent")}


def oracle_scores(oracle: Oracle, x) -> dict[str, np.ndarray]:
    xb = as_batch(x, oracle.heads.weight.dtype)
    with no_grad():
        z = T.sigmoid(oracle(Tensor(xb))).data
    return {name: z[:, i] for i, name in enumerate(ORACLE_HEADS)}


class FeatureNet(nn.Module):
    """Small conv encoder -> fixed-length embedding, trained through a concept head."""

    def __init__(self, rng, dim: int = 64, widths=(16, 32, 64), dtype=np.float32):
        self.trunk = ConvTrunk(1, widths, rng, dtype)
        self.embed = nn.Linear(widths[2], dim, rng, dtype=dtype)
        self.concept_head = nn.Linear(dim, len(sd.CONCEPTS), rng, gain=0.1, dtype=dtype)
        # fixed output scale; calibrated after training, stored with the weights
        self.scale = Tensor(np.ones(1, dtype=dtype))
        self.dim = dim

    def features(self, x: Tensor) -> Tensor:
        return self.embed(self.trunk(x)) * self.scale

    def __call__(self, x: Tensor) -> Tensor:
        return self.features(x)


def extract_features(net: FeatureNet, x) -> np.ndarray:
    xb = as_batch(x, net.embed.weight.dtype)
    with no_grad():
        return net.features(Tensor(xb)).data


# -- training ---------------------------------------------------------------------
@dataclass
class FitHyper:
    iterations: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 50
    weight_decay: float = 0.0
    noise_aug: float = 0.0
    flip_aug: bool = False


def _fit(module: nn.Module, loss_fn: Callable[[np.ndarray], Tensor], n: int, hyper: FitHyper,
         rng: np.random.Generator, what: str) -> list[float]:
    from .diffusion import lr_at

    opt = nn.Adam(module.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    losses = []
    for it in range(hyper.iterations):
        idx = rng.integers(0, n, size=hyper.batch_size)
        loss = loss_fn(idx)
        opt.zero_grad()
        loss.backward()
        opt.step(lr_at(it, hyper))
        losses.append(loss.item())
        if it % 250 == 0:
            log.debug("%s it=%d loss=%.4f", what, it, losses[-1])
    return losses


def _augment(x: np.ndarray, hyper: FitHyper, rng: np.random.Generator) -> np.ndarray:
    if hyper.flip_aug:
        flip = rng.random(len(x)) < 0.5
        x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
    if hyper.noise_aug:
        x = x + hyper.noise_aug * rng.standard_normal(x.shape, dtype=np.float32)
    return np.ascontiguousarray(x, dtype=np.float32)


def _require(data: sd.PhantomSet, what: str) -> None:
    if data is None or len(data) == 0:
        raise ValueError(f"{what}: empty dataset")
    if data.masks is None or data.labels is None or data.concepts is None:
        raise ValueError(f"{what}: dataset lacks masks, labels or concepts")


def balanced_weights(labels: np.ndarray, n_classes: int = 2) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = len(labels) / (n_classes * np.maximum(counts, 1.0))
    return w[labels]


def train_segmenter(seg: Segmenter, data: sd.PhantomSet, hyper: FitHyper, rng) -> list[float]:
    x = as_batch(data.images)
    counts = np.bincount(data.masks.ravel(), minlength=N_SEG).astype(np.float64)
    class_w = (counts.sum() / np.maximum(counts, 1.0)) ** 0.5
    class_w = (class_w / class_w.mean()).astype(np.float32)
    noise_only = FitHyper(noise_aug=hyper.noise_aug)  # flips would desync the masks

    def loss_fn(idx):
        logits = seg(Tensor(_augment(x[idx], noise_only, rng)))
        return nn.cross_entropy(logits, data.masks[idx], class_w[data.masks[idx]])

    return _fit(seg, loss_fn, len(x), hyper, rng, "segmenter")


def train_predictor(f: QualityClassifier, data: sd.PhantomSet, hyper: FitHyper, rng) -> list[float]:
    """Fit l on frozen-segmenter probabilities (class-balanced loss)."""
    x = as_batch(data.images)
    f.segmenter.freeze()
    with no_grad():
        probs = np.concatenate([T.softmax(f.segmenter(Tensor(x[i:i + 256])), axis=-1).data
                                for i in range(0, len(x), 256)])
    weights = balanced_weights(data.labels)

    def loss_fn(idx):
        logits = f.predictor(Tensor(probs[idx]), Tensor(x[idx]))
        return nn.cross_entropy(logits, data.labels[idx], weights[idx])

    return _fit(f.predictor, loss_fn, len(x), hyper, rng, "predictor")


def train_classifier(data: sd.PhantomSet, rng: np.random.Generator, seg_hyper: FitHyper | None = None,
                     pred_hyper: FitHyper | None = None, init_seed: int = 1) -> QualityClassifier:
    """Sequential recipe: segmenter first, then the predictor with the segmenter frozen."""
    _require(data, "train_classifier")
    f = QualityClassifier(np.random.default_rng(init_seed))
    train_segmenter(f.segmenter, data, seg_hyper or FitHyper(), rng)
    train_predictor(f, data, pred_hyper or FitHyper(), rng)
    return f.freeze()


def train_oracle(data: sd.PhantomSet, rng: np.random.Generator, hyper: FitHyper | None = None,
                 init_seed: int = 2) -> Oracle:
    _require(data, "train_oracle")
    hyper = hyper or FitHyper()
    oracle = Oracle(np.random.default_rng(init_seed))
    x = as_batch(data.images)
    targets = np.zeros((len(x), len(ORACLE_HEADS)), dtype=np.float32)
    targets[:, 0] = data.labels
    for j, name in enumerate(ORACLE_HEADS[1:], start=1):
        targets[:, j] = data.concepts[:, _ORACLE_TARGETS[name]]
    # up-weight the rare SP class in the overall head
    w_sp = balanced_weights(data.labels).astype(np.float32)

    def loss_fn(idx):
        z = oracle(Tensor(_augment(x[idx], hyper, rng)))
        zero = Tensor(np.zeros((len(idx), 1), dtype=z.dtype))
        # [0, z] under softmax gives sigmoid(z) for the SP class
        overall = T.concat([zero, _column(z, 0)], axis=-1)
        l_overall = nn.cross_entropy(overall, data.labels[idx], w_sp[idx])
        l_concepts = nn.bce_with_logits(_columns(z, 1, len(ORACLE_HEADS)), targets[idx, 1:])
        return l_overall + l_concepts

    _fit(oracle, loss_fn, len(x), hyper, rng, "oracle")
    return oracle.freeze()


def _column(z: Tensor, j: int) -> Tensor:
    sel = np.zeros((z.shape[1], 1), dtype=z.dtype)
    sel[j, 0] = 1.0
    return T.matmul(z, Tensor(sel))


def _columns(z: Tensor, lo: int, hi: int) -> Tensor:
    sel = np.zeros((z.shape[1], hi - lo), dtype=z.dtype)
    sel[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
    return T.matmul(z, Tensor(sel))


def train_features(data: sd.PhantomSet, rng: np.random.Generator, hyper: FitHyper | None = None,
                   init_seed: int = 3, dim: int = 64) -> FeatureNet:
    """Train an encoder through a concept head, then calibrate its output scale.

    The scale makes the mean squared distance between embeddings of two random
    training images equal to one.
    """
    _require(data, "train_features")
    hyper = hyper or FitHyper()
    net = FeatureNet(np.random.default_rng(init_seed), dim=dim)
    x = as_batch(data.images)

    def loss_fn(idx):
        z = net.concept_head(net.features(Tensor(_augment(x[idx], hyper, rng))))
        return nn.bce_with_logits(z, data.concepts[idx])

    _fit(net, loss_fn, len(x), hyper, rng, "features")
    feats = extract_features(net, x[: min(len(x), 512)]).astype(np.float64)
    i, j = np.triu_indices(len(feats), k=1)
    msd = float(((feats[i] - feats[j]) ** 2).sum(axis=1).mean()) if len(feats) > 1 else 1.0
    net.scale.data = (net.scale.data / np.sqrt(max(msd, 1e-12))).astype(net.scale.dtype)
    return net.freeze()
