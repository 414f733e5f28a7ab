"""Classifier-guided reverse diffusion and the iterative counterfactual loop.

Each guided step estimates a clean image from the noisy iterate, evaluates the
counterfactual loss on it, and shifts the reverse-process mean by
``-Sigma_t * g``. Iterations re-run the corrupt-then-guide pass on the previous
output while the proximity term stays anchored to the original image.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffusion as D
from . import models as M
from . import synthdata as sd
from .autodiff import tensor as T
from .autodiff.tensor import NonFiniteError, Tensor, grad, no_grad

GRAD_MODES = ("denoised", "noisy")
SEARCH_MODES = ("per_image", "per_dataset")
CORRUPT_TAG = 0  # rng stream slot for the tau-corruption noise; reverse steps use t >= 1


@dataclass
class GuidanceConfig:
    tau: int = 120
    lambda_c: float = 40.0
    lambda_p: float = 30.0
    L: int = 5
    target: int = sd.SP
    grad_mode: str = "denoised"
    lambda_c_candidates: tuple[float, ...] = (40.0, 60.0, 80.0)
    use_perceptual: bool = True
    redraw_noise: bool = True
    search: str = "per_image"
    resolution_scale: float = 1.0  # multiplies g; per-pixel loss gradients grow as the pixel count shrinks

    def validate(self, T_sample: int) -> "GuidanceConfig":
        if not 1 <= self.tau <= T_sample:
            raise ValueError(f"tau must be in 1..{T_sample}, got {self.tau}")
        if self.lambda_c < 0 or self.lambda_p < 0 or any(c < 0 for c in self.lambda_c_candidates):
            raise ValueError("guidance strengths must be non-negative")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.search not in SEARCH_MODES:
            raise ValueError(f"search must be one of {SEARCH_MODES}")
        if self.target not in (sd.NSP, sd.SP):
            raise ValueError(f"target must be NSP or SP, got {self.target}")
        if not self.resolution_scale > 0:
            raise ValueError(f"resolution_scale must be positive, got {self.resolution_scale}")
        if not self.lambda_c_candidates:
            raise ValueError("lambda_c_candidates is empty")
        return self

    @property
    def effective_lambda_p(self) -> float:
        return self.lambda_p if self.use_perceptual else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_c_candidates"] = list(self.lambda_c_candidates)
        return d


@dataclass
class ModelBundle:
    denoiser: object
    classifier: M.QualityClassifier
    f_guid: M.FeatureNet
    schedule: D.NoiseSchedule  # the re-spaced sampling schedule
    f_eval: M.FeatureNet | None = None
    oracle: M.Oracle | None = None


# -- loss -------------------------------------------------------------------------
def per_image_losses(x_hat: Tensor, x_orig: np.ndarray, y: int, f: M.QualityClassifier,
                     f_guid: M.FeatureNet, lambda_c: float, lambda_p: float,
                     orig_features: np.ndarray | None = None) -> Tensor:
    """lambda_c * NLL of class y under f plus lambda_p * squared feature distance, per image."""
    if tuple(x_hat.shape) != tuple(np.shape(x_orig)):
        raise T.ShapeError(f"guidance_loss: x_hat {x_hat.shape} vs x_orig {np.shape(x_orig)}")
    n = x_hat.shape[0]
    total = Tensor(np.zeros(n, dtype=x_hat.dtype))
    if lambda_c:
        logp = T.log_softmax(f.logits(x_hat), axis=-1)
        onehot = np.zeros((n, 2), dtype=x_hat.dtype)
        onehot[:, y] = 1.0
        total = total + (-lambda_c) * T.sum_(logp * onehot, axis=-1)
    if lambda_p:
        if orig_features is None:
            with no_grad():
                orig_features = f_guid.features(Tensor(np.asarray(x_orig, dtype=x_hat.dtype))).data
        diff = f_guid.features(x_hat) - Tensor(orig_features.astype(x_hat.dtype))
        total = total + lambda_p * T.sum_(T.square(diff), axis=-1)
    return total


def guidance_loss(x_hat: Tensor, x_orig: np.ndarray, y: int, f: M.QualityClassifier, f_guid: M.FeatureNet,
                  lambda_c: float, lambda_p: float, orig_features: np.ndarray | None = None) -> Tensor:
    """Scalar guiding loss: the sum of per-image losses, so each image's gradient is its own."""
    loss = T.sum_(per_image_losses(x_hat, x_orig, y, f, f_guid, lambda_c, lambda_p, orig_features))
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("guidance_loss: non-finite loss")
    return loss


# -- gradient estimators --------------------------------------------------------
def grad_wrt_denoised(x_t: np.ndarray, t: int, model, schedule: D.NoiseSchedule,
                      loss_closure: Callable[[Tensor], Tensor]) -> tuple[np.ndarray, np.ndarray]:
    """g = dL/d x0_hat with the noise prediction held constant (no denoiser backprop).

    Returns ``(g, eps_hat)`` so the caller can reuse the noise prediction for the mean.
    """
    eps = D.predict_eps(model, x_t, t, schedule)
    x0 = Tensor(D.one_step_denoise(x_t, t, eps, schedule), requires_grad=True)
    (g,) = grad(loss_closure(x0), [x0])
    if not np.isfinite(g).all():
        raise NonFiniteError(f"grad_wrt_denoised: non-finite gradient at t={t}")
    return g, eps


def grad_wrt_noisy(x_t: np.ndarray, t: int, model, schedule: D.NoiseSchedule,
                   loss_closure: Callable[[Tensor], Tensor]) -> tuple[np.ndarray, np.ndarray]:
    """g = dL/d x_t, back-propagating through the denoiser."""
    xt = Tensor(x_t, requires_grad=True)
    eps = model(xt, schedule.model_t(t))
    x0 = D.one_step_denoise(xt, t, eps, schedule)
    (g,) = grad(loss_closure(x0), [xt])
    if not np.isfinite(g).all():
        raise NonFiniteError(f"grad_wrt_noisy: non-finite gradient at t={t}")
    return g, eps.data


def guided_reverse_step(x_t: np.ndarray, t: int, g: np.ndarray, model, schedule: D.NoiseSchedule, rng,
                        eps_hat: np.ndarray | None = None) -> np.ndarray:
    """x_{t-1} ~ N(mu - Sigma_t g, Sigma_t)."""
    schedule.check_t(t)
    if np.shape(g) != np.shape(x_t):
        raise T.ShapeError(f"guided_reverse_step: g {np.shape(g)} vs x_t {np.shape(x_t)}")
    eps = D.predict_eps(model, x_t, t, schedule) if eps_hat is None else eps_hat
    mean = D.predict_mu(x_t, t, eps, schedule) - schedule.sigma2(t) * g
    out = D.sample_step(mean, t, schedule, rng)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"guided_reverse_step: non-finite sample at t={t}")
    return out


# -- seeded noise streams -------------------------------------------------------------
def image_key(image_id) -> int:
    if isinstance(image_id, (int, np.integer)):
        return int(image_id)
    return int.from_bytes(hashlib.sha256(str(image_id).encode()).digest()[:4], "little")


def stream(seed: int, image_id, iteration: int, t: int) -> np.random.Generator:
    """Generator for one (image, iteration, timestep) slot, independent of batching."""
    return np.random.default_rng(np.random.SeedSequence([seed, image_key(image_id), iteration, t]))


def streams(seed: int, ids: Sequence, iteration: int, t: int) -> list[np.random.Generator]:
    return [stream(seed, i, iteration, t) for i in ids]


# -- single pass and the iterative loop --------------------------------------------------
def _nhwc(x) -> np.ndarray:
    x = np.asarray(x)
    return x[..., None] if x.ndim == 3 else x


def counterfactual_once(x_in: np.ndarray, x_orig: np.ndarray, y: int, config: GuidanceConfig,
                        models: ModelBundle, seed: int, ids: Sequence, iteration: int = 1,
                        lambda_c: float | None = None, observer: Callable | None = None) -> np.ndarray:
    """Corrupt ``x_in`` to level tau, then run tau guided reverse steps anchored to ``x_orig``.

    ``observer(x_hat, x_orig)`` is called at every guided step for instrumentation.
    """
    schedule = models.schedule
    config.validate(schedule.T)
    lam_c = config.lambda_c if lambda_c is None else lambda_c
    lam_p = config.effective_lambda_p
    x_in = _nhwc(x_in).astype(np.float32)
    x_orig = _nhwc(x_orig).astype(np.float32)
    if x_in.shape != x_orig.shape or len(ids) != len(x_in):
        raise T.ShapeError(f"counterfactual_once: x_in {x_in.shape}, x_orig {x_orig.shape}, {len(ids)} ids")

    with no_grad():
        orig_feats = models.f_guid.features(Tensor(x_orig)).data if lam_p else None

    def closure(x_hat: Tensor) -> Tensor:
        if observer is not None:
            observer(x_hat, x_orig)
        return guidance_loss(x_hat, x_orig, y, models.classifier, models.f_guid, lam_c, lam_p, orig_feats)

    corrupt_iter = iteration if config.redraw_noise else 1
    eps = D.draw_normal(streams(seed, ids, corrupt_iter, CORRUPT_TAG), x_in.shape)
    x = D.forward_sample(x_in, config.tau, eps, schedule).astype(np.float32)
    grad_fn = grad_wrt_denoised if config.grad_mode == "denoised" else grad_wrt_noisy
    for t in range(config.tau, 0, -1):
        if lam_c or lam_p:
            g, eps_hat = grad_fn(x, t, models.denoiser, schedule, closure)
        else:
            g, eps_hat = np.zeros_like(x), D.predict_eps(models.denoiser, x, t, schedule)
        x = guided_reverse_step(x, t, (g * config.resolution_scale).astype(np.float32), models.denoiser, schedule,
                                streams(seed, ids, iteration, t), eps_hat)
    return np.clip(x, -1.0, 1.0)


@dataclass
class CounterfactualRecord:
    image_id: str
    method: str
    original: np.ndarray  # (H, W)
    iterations: list[np.ndarray]  # L images (H, W)
    lambda_c: float
    seed: int
    config: dict
    p_sp_original: float = float("nan")
    p_sp: list[float] = field(default_factory=list)
    oracle_original: dict = field(default_factory=dict)
    oracle: list[dict] = field(default_factory=list)
    cosine: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.iterations[-1]

    @property
    def L(self) -> int:
        return len(self.iterations)

    def content_hash(self) -> str:
        """Hash of the images and scores; excludes method name and timings."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.original, dtype="<f4").tobytes())
        for im in self.iterations:
            h.update(np.ascontiguousarray(im, dtype="<f4").tobytes())
        h.update(repr((self.image_id, float(self.lambda_c), self.seed)).encode())
        return h.hexdigest()


def _run_chain(x: np.ndarray, ids: Sequence, lam: float, config: GuidanceConfig, models: ModelBundle,
               seed: int, timings: list | None, observer=None) -> list[np.ndarray]:
    outs = []
    x_in = x
    for it in range(1, config.L + 1):
        t0 = time.perf_counter()
        x_in = counterfactual_once(x_in, x, config.target, config, models, seed, ids, it, lam, observer)
        if timings is not None:
            timings.append({"lambda_c": lam, "iteration": it, "n": len(ids),
                            "seconds": time.perf_counter() - t0})
        outs.append(x_in)
    return outs


def _target_prob(models: ModelBundle, x: np.ndarray, target: int) -> np.ndarray:
    p_sp, _ = M.classify(models.classifier, x)
    return p_sp if target == sd.SP else 1.0 - p_sp


def diff_ice(x: np.ndarray, ids: Sequence, config: GuidanceConfig, models: ModelBundle, seed: int,
             method: str = "diff_ice", timings: list | None = None, observer=None,
             score: bool = True) -> list[CounterfactualRecord]:
    """Iterative counterfactuals for a batch with the lambda_c search.

    Per image, the smallest candidate whose final output is classified as the
    target wins; if none flips, the candidate with the highest target
    probability is kept. Candidates run in ascending order and only on images
    still without a flip, which gives the same choice as running them all.
    """
    config.validate(models.schedule.T)
    x = _nhwc(x).astype(np.float32)
    ids = list(ids)
    n = len(ids)
    candidates = sorted(float(c) for c in config.lambda_c_candidates)
    chosen: dict[int, tuple[float, list[np.ndarray]]] = {}
    best: dict[int, tuple[float, float, list[np.ndarray]]] = {}
    chain_seconds = {i: [0.0] * config.L for i in range(n)}

    if config.search == "per_image":
        pending = list(range(n))
        for lam in candidates:
            if not pending:
                break
            local: list = []
            outs = _run_chain(x[pending], [ids[i] for i in pending], lam, config, models, seed, local, observer)
            for rec in local:
                for i in pending:
                    chain_seconds[i][rec["iteration"] - 1] += rec["seconds"]
            if timings is not None:
                timings.extend(local)
            p = _target_prob(models, outs[-1], config.target)
            still = []
            for k, i in enumerate(pending):
                images = [o[k] for o in outs]
                if p[k] > 0.5:
                    chosen[i] = (lam, images)
                else:
                    if i not in best or p[k] > best[i][0]:
                        best[i] = (float(p[k]), lam, images)
                    still.append(i)
            pending = still
        for i in pending:
            chosen[i] = (best[i][1], best[i][2])
    else:
        runs = {}
        for lam in candidates:
            local = []
            runs[lam] = _run_chain(x, ids, lam, config, models, seed, local, observer)
            for rec in local:
                for i in range(n):
                    chain_seconds[i][rec["iteration"] - 1] += rec["seconds"]
            if timings is not None:
                timings.extend(local)
        flip_rates = {lam: float((_target_prob(models, runs[lam][-1], config.target) > 0.5).mean())
                      for lam in candidates}
        top = max(flip_rates.values())
        lam = min(l for l in candidates if flip_rates[l] == top)
        for i in range(n):
            chosen[i] = (lam, [o[i] for o in runs[lam]])

    records = [
        CounterfactualRecord(
            image_id=str(ids[i]), method=method, original=x[i, ..., 0].copy(),
            iterations=[im[..., 0].copy() for im in chosen[i][1]], lambda_c=chosen[i][0],
            seed=seed, config=config.to_dict(), seconds=chain_seconds[i],
        )
        for i in range(n)
    ]
    if score:
        score_records(records, models)
    return records


def score_records(records: list[CounterfactualRecord], models: ModelBundle) -> None:
    """Fill classifier, oracle and feature-similarity scores for every iteration."""
    if not records:
        return
    orig = np.stack([r.original for r in records])
    p0, _ = M.classify(models.classifier, orig)
    o0 = M.oracle_scores(models.oracle, orig) if models.oracle is not None else None
    f0 = M.extract_features(models.f_eval, orig) if models.f_eval is not None else None
    per_iter = []
    for it in range(records[0].L):
        xi = np.stack([r.iterations[it] for r in records])
        p, _ = M.classify(models.classifier, xi)
        o = M.oracle_scores(models.oracle, xi) if models.oracle is not None else None
        cos = cosine_rows(f0, M.extract_features(models.f_eval, xi)) if f0 is not None else None
        per_iter.append((p, o, cos))
    for k, r in enumerate(records):
        r.p_sp_original = float(p0[k])
        r.oracle_original = {name: float(v[k]) for name, v in o0.items()} if o0 else {}
        r.p_sp = [float(p[k]) for p, _, _ in per_iter]
        r.oracle = [{name: float(v[k]) for name, v in o.items()} if o else {} for _, o, _ in per_iter]
        r.cosine = [float(c[k]) if c is not None else float("nan") for _, _, c in per_iter]


def cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.maximum(np.linalg.norm(a, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=1), eps)
    return (a * b).sum(axis=1) / (na * nb)


def batched(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def mean_batch_seconds(timings: list[dict]) -> float:
    return float(np.mean([r["seconds"] for r in timings])) if timings else math.nan
