"""Pipeline stages: each reads upstream artifacts, writes its own, and records a manifest.

Layout under the output directory::

    config.json               resolved configuration
    data/                     synthetic splits (PGM) and their manifest
    models/<name>/            checkpoints (f32 tensors + manifest.json)
    records/<method>/         counterfactual records, one directory per image
    reports/                  metric JSON and CSV tables
    figures/                  rendered figures
    manifests/<stage>.json    config hash, input hashes, output hashes
    timings/<stage>.json      wall-clock measurements (not hashed)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import diffusion as D
from .. import guidance as G
from .. import metrics as MT
from .. import models as M
from .. import synthdata as sd
from ..autodiff import checkpoint
from .config import ABLATION, METHODS, ExperimentConfig

log = logging.getLogger(__name__)

MODEL_STAGE = {"denoiser": "train-diffusion", "classifier": "train-classifier", "oracle": "train-oracle",
               "f_guid": "train-features", "f_eval": "train-features"}
STAGE_CODES = {"synth": 1, "train-diffusion": 2, "train-classifier": 3, "train-oracle": 4,
               "train-features": 5, "generate": 6}


class MissingArtifact(RuntimeError):
    """An upstream stage has not produced what this stage needs."""

    def __init__(self, what: str, stage: str):
        super().__init__(f"missing {what}: run the '{stage}' stage first")
        self.stage = stage


# -- helpers ------------------------------------------------------------------------
def stage_rng(config: ExperimentConfig, stage: str, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, STAGE_CODES[stage], sub]))


def stage_int(config: ExperimentConfig, stage: str, sub: int) -> int:
    return int(np.random.SeedSequence([config.seed, STAGE_CODES[stage], sub]).generate_state(1)[0])


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_hashes(root: Path) -> dict[str, str]:
    """sha256 of every file below ``root`` keyed by relative POSIX path."""
    return {p.relative_to(root).as_posix(): file_hash(p) for p in sorted(root.rglob("*")) if p.is_file()}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out: Path, stage: str, config_hash: str, inputs: dict, outputs: dict) -> dict:
    manifest = {"stage": stage, "config_hash": config_hash, "inputs": inputs, "outputs": outputs}
    _write_json(out / "manifests" / f"{stage}.json", manifest)
    return manifest


def write_timings(out: Path, stage: str, timings) -> None:
    _write_json(out / "timings" / f"{stage}.json", timings)


def read_manifest(out: Path, stage: str, what: str) -> dict:
    path = out / "manifests" / f"{stage}.json"
    if not path.is_file():
        raise MissingArtifact(what, stage)
    return json.loads(path.read_text())


def _out(config: ExperimentConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    return out


# -- data ----------------------------------------------------------------------------
def cmd_synth(config: ExperimentConfig) -> dict:
    out = _out(config)
    t0 = time.perf_counter()
    manifest = sd.generate_dataset(out / "data", {"train": config.data.n_train, "test": config.data.n_test},
                                   config.data.class_balance, config.seed)
    write_timings(out, "synth", {"seconds": time.perf_counter() - t0})
    return write_manifest(out, "synth", config.section_hash("data"), {},
                          {"data/manifest.json": manifest["hash"]})


def load_data(out: Path, split: str) -> sd.PhantomSet:
    m = read_manifest(out, "synth", "dataset")
    if file_hash(out / "data" / "manifest.json") != m["outputs"]["data/manifest.json"]:
        raise RuntimeError("dataset manifest does not match the synth stage record; re-run 'synth'")
    return sd.load_split(out / "data", split)


# -- training stages ------------------------------------------------------------------------
def _fit(c) -> M.FitHyper:
    return M.FitHyper(iterations=c.iterations, batch_size=c.batch_size, lr=c.lr, warmup=c.warmup,
                      noise_aug=c.noise_aug, flip_aug=c.flip_aug)


def _save_models(out: Path, stage: str, config_hash: str, inputs: dict, models: dict, seconds: float) -> dict:
    outputs = {}
    for name, (module, meta) in models.items():
        ck = checkpoint.save_module(out / "models" / name, module, meta)
        outputs[f"models/{name}"] = ck["content_hash"]
    write_timings(out, stage, {"seconds": seconds})
    return write_manifest(out, stage, config_hash, inputs, outputs)


def _data_input(out: Path) -> dict:
    return {"data/manifest.json": read_manifest(out, "synth", "dataset")["outputs"]["data/manifest.json"]}


def cmd_train_diffusion(config: ExperimentConfig) -> dict:
    out = _out(config)
    data = load_data(out, "train")
    c = config.denoiser
    hyper = D.DenoiserHyper(iterations=c.iterations, batch_size=c.batch_size, lr=c.lr, warmup=c.warmup,
                            widths=tuple(c.widths), emb_dim=c.emb_dim,
                            init_seed=stage_int(config, "train-diffusion", 1))
    t0 = time.perf_counter()
    res = D.train_denoiser(data.images, D.build_schedule(c.T_train), hyper, stage_rng(config, "train-diffusion"))
    meta = {**res.model.descriptor(), "T_train": c.T_train, "final_loss": float(np.mean(res.losses[-50:]))
            if res.losses else None}
    return _save_models(out, "train-diffusion", config.section_hash("data", "denoiser"), _data_input(out),
                        {"denoiser": (res.model, meta)}, time.perf_counter() - t0)


def cmd_train_classifier(config: ExperimentConfig) -> dict:
    out = _out(config)
    data = load_data(out, "train")
    t = config.training
    t0 = time.perf_counter()
    f = M.train_classifier(data, stage_rng(config, "train-classifier"), _fit(t.segmenter), _fit(t.predictor),
                           init_seed=stage_int(config, "train-classifier", 1))
    return _save_models(out, "train-classifier", config.section_hash("data", "training"), _data_input(out),
                        {"classifier": (f, {"arch": "segmenter+predictor"})}, time.perf_counter() - t0)


def cmd_train_oracle(config: ExperimentConfig) -> dict:
    out = _out(config)
    data = load_data(out, "train")
    t0 = time.perf_counter()
    oracle = M.train_oracle(data, stage_rng(config, "train-oracle"), _fit(config.training.oracle),
                            init_seed=stage_int(config, "train-oracle", 1))
    return _save_models(out, "train-oracle", config.section_hash("data", "training"), _data_input(out),
                        {"oracle": (oracle, {"heads": list(M.ORACLE_HEADS)})}, time.perf_counter() - t0)


def cmd_train_features(config: ExperimentConfig) -> dict:
    """Two independently initialised and trained extractors: one guides, one evaluates."""
    out = _out(config)
    data = load_data(out, "train")
    t = config.training
    t0 = time.perf_counter()
    nets = {}
    for k, name in enumerate(("f_guid", "f_eval"), start=1):
        net = M.train_features(data, stage_rng(config, "train-features", k), _fit(t.features),
                               init_seed=stage_int(config, "train-features", 10 + k), dim=t.feature_dim)
        nets[name] = (net, {"dim": t.feature_dim, "role": name})
    return _save_models(out, "train-features", config.section_hash("data", "training"), _data_input(out),
                        nets, time.perf_counter() - t0)


# -- model loading --------------------------------------------------------------------------
def _check_model(out: Path, name: str) -> str:
    stage = MODEL_STAGE[name]
    m = read_manifest(out, stage, f"{name} checkpoint")
    key = f"models/{name}"
    if key not in m["outputs"] or not (out / key / "manifest.json").is_file():
        raise MissingArtifact(f"{name} checkpoint", stage)
    return m["outputs"][key]


def load_bundle(out: Path, config: ExperimentConfig) -> tuple[G.ModelBundle, dict]:
    """All five models plus the re-spaced schedule, and their checkpoint hashes."""
    hashes = {name: _check_model(out, name) for name in MODEL_STAGE}
    c = config.denoiser
    rng = np.random.default_rng(0)  # weights are overwritten by the checkpoint
    den = D.UNetDenoiser(rng, tuple(c.widths), c.emb_dim)
    checkpoint.load_module(out / "models" / "denoiser", den)
    f = M.QualityClassifier(rng)
    checkpoint.load_module(out / "models" / "classifier", f)
    oracle = M.Oracle(rng)
    checkpoint.load_module(out / "models" / "oracle", oracle)
    feats = {}
    for name in ("f_guid", "f_eval"):
        feats[name] = M.FeatureNet(rng, dim=config.training.feature_dim)
        checkpoint.load_module(out / "models" / name, feats[name])
    for m in (den, f, oracle, *feats.values()):
        m.freeze()
    schedule = D.respace(D.build_schedule(c.T_train), c.T_sample)
    bundle = G.ModelBundle(den, f, feats["f_guid"], schedule, f_eval=feats["f_eval"], oracle=oracle)
    return bundle, {f"models/{k}": v for k, v in hashes.items()}


# -- record persistence --------------------------------------------------------------------
def record_to_json(rec: G.CounterfactualRecord) -> dict:
    return {"image_id": rec.image_id, "method": rec.method, "lambda_c": rec.lambda_c, "seed": rec.seed,
            "config": rec.config, "L": rec.L, "p_sp_original": rec.p_sp_original, "p_sp": rec.p_sp,
            "oracle_original": rec.oracle_original, "oracle": rec.oracle, "cosine": rec.cosine,
            "images": "images.f32", "shape": [rec.L + 1, sd.H, sd.W]}


def save_record(directory: Path, rec: G.CounterfactualRecord) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    stack = np.stack([rec.original, *rec.iterations]).astype("<f4")
    (directory / "images.f32").write_bytes(stack.tobytes())
    for i, im in enumerate(rec.iterations, start=1):
        sd.write_pgm(directory / f"iter_{i}.pgm", sd.quantize(im))
    sd.write_pgm(directory / "original.pgm", sd.quantize(rec.original))
    _write_json(directory / "record.json", record_to_json(rec))


def load_record(directory: Path) -> G.CounterfactualRecord:
    d = json.loads((directory / "record.json").read_text())
    stack = np.frombuffer((directory / d["images"]).read_bytes(), dtype="<f4").reshape(d["shape"])
    stack = stack.astype(np.float32)
    return G.CounterfactualRecord(
        image_id=d["image_id"], method=d["method"], original=stack[0], iterations=list(stack[1:]),
        lambda_c=d["lambda_c"], seed=d["seed"], config=d["config"], p_sp_original=d["p_sp_original"],
        p_sp=d["p_sp"], oracle_original=d["oracle_original"], oracle=d["oracle"], cosine=d["cosine"])


def load_records(out: Path, method: str) -> list[G.CounterfactualRecord]:
    root = out / "records" / method
    if not (root / "manifest.json").is_file():
        raise MissingArtifact(f"records for {method}", "generate")
    manifest = json.loads((root / "manifest.json").read_text())
    return [load_record(root / i) for i in manifest["image_ids"]]


# -- generation ---------------------------------------------------------------------------------
def nsp_test_images(out: Path, config: ExperimentConfig) -> tuple[list[str], np.ndarray]:
    test = load_data(out, "test")
    idx = np.flatnonzero(test.labels == sd.NSP)
    if config.generate.n_images is not None:
        idx = idx[: config.generate.n_images]
    return [test.ids[i] for i in idx], test.images[idx]


_WORKER: dict = {}


def _worker_init(out: str, config_json: str) -> None:
    from .config import from_dict

    config = from_dict(json.loads(config_json))
    _WORKER["bundle"], _ = load_bundle(Path(out), config)


def _worker_run(task):
    batch_no, ids, x, gcfg, seed, method = task
    timings: list = []
    recs = G.diff_ice(x, ids, gcfg, _WORKER["bundle"], seed, method=method, timings=timings)
    for row in timings:
        row["batch"] = batch_no
    return recs, timings


def generation_seed(config: ExperimentConfig) -> int:
    return stage_int(config, "generate", 0)


def run_method(bundle: G.ModelBundle, ids, images, gcfg: G.GuidanceConfig, method: str, config: ExperimentConfig,
               jobs: int = 1, out: Path | None = None) -> tuple[list[G.CounterfactualRecord], list[dict]]:
    """Run one guidance configuration over all images in fixed-size batches."""
    seed = generation_seed(config)
    bs = config.generate.batch_size
    tasks = [(b, ids[i:i + bs], images[i:i + bs], gcfg, seed, method)
             for b, i in enumerate(range(0, len(ids), bs))]
    if jobs > 1 and len(tasks) > 1 and out is not None:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                                 initargs=(str(out), config.to_json())) as pool:
            results = list(pool.map(_worker_run, tasks))
    else:
        _WORKER["bundle"] = bundle
        results = [_worker_run(t) for t in tasks]
    records = [r for recs, _ in results for r in recs]
    timings = [row for _, rows in results for row in rows]
    return records, timings


def _persist_method(out: Path, method: str, records) -> dict:
    root = out / "records" / method
    for rec in records:
        save_record(root / rec.image_id, rec)
    hashes = {rec.image_id: rec.content_hash() for rec in records}
    _write_json(root / "manifest.json", {"method": method, "image_ids": [r.image_id for r in records],
                                         "record_hashes": hashes})
    return {f"records/{method}/{k}": v for k, v in tree_hashes(root).items()}


def generation_plan(config: ExperimentConfig, methods=None) -> list[tuple[str, G.GuidanceConfig]]:
    plan = []
    for m in methods or config.generate.methods:
        if m == ABLATION:
            plan += [(f"{ABLATION}/{name}", cfg) for name, _, cfg in config.ablation_cells()]
        else:
            plan.append((m, config.guidance_for(m)))
    return plan


def cmd_generate(config: ExperimentConfig, methods=None, jobs: int | None = None) -> dict:
    out = _out(config)
    bundle, model_hashes = load_bundle(out, config)
    ids, images = nsp_test_images(out, config)
    inputs = {**_data_input(out), **model_hashes}
    jobs = config.generate.jobs if jobs is None else jobs
    outputs: dict = {}
    timings: dict = {}
    for method, gcfg in generation_plan(config, methods):
        log.info("generating %s for %d images", method, len(ids))
        records, rows = run_method(bundle, ids, images, gcfg, method, config, jobs, out)
        outputs.update(_persist_method(out, method, records))
        timings[method] = rows
    write_timings(out, "generate", timings)
    return write_manifest(out, "generate", config.section_hash("guidance", "ablation", "generate"), inputs,
                          outputs)


# -- evaluation ----------------------------------------------------------------------------------
def _generated_methods(out: Path) -> list[str]:
    m = read_manifest(out, "generate", "counterfactual records")
    names = sorted({"/".join(k.split("/")[1:-2]) for k in m["outputs"] if k.endswith("/record.json")})
    return names


def cmd_evaluate(config: ExperimentConfig) -> dict:
    out = _out(config)
    methods = _generated_methods(out)
    bundle, model_hashes = load_bundle(out, config)
    timing_path = out / "timings" / "generate.json"
    all_timings = json.loads(timing_path.read_text()) if timing_path.is_file() else {}
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    efficiency = {}
    for method in methods:
        records = load_records(out, method)
        rep = MT.build_report(records, f_eval=bundle.f_eval, timings=all_timings.get(method, ()))
        reports[method] = rep
        efficiency[method] = rep.efficiency
        (reports_dir / f"metrics_{method.replace('/', '_')}.json").write_text(rep.to_json())
    main = [reports[m] for m in METHODS if m in reports]
    if main:
        (reports_dir / "methods.csv").write_text(MT.rows_csv([_final_only(r) for r in main]))
        (reports_dir / "iterations.csv").write_text(MT.rows_csv(main))
        primary = reports.get("diff_ice", main[0])
        for s in MT.STRUCTURES:
            (reports_dir / f"qd_vs_qs_{s}.csv").write_text(MT.qd_csv(primary, s))
    cells = [(name, params) for name, params, _ in config.ablation_cells() if f"{ABLATION}/{name}" in reports]
    if cells:
        extra = {f"{ABLATION}/{name}": params for name, params in cells}
        (reports_dir / "ablation.csv").write_text(
            MT.rows_csv([_final_only(reports[f"{ABLATION}/{name}"]) for name, _ in cells], extra))
    write_timings(out, "evaluate", {"efficiency": efficiency})
    gen = read_manifest(out, "generate", "counterfactual records")
    inputs = {"manifests/generate.json": file_hash(out / "manifests" / "generate.json"),
              "models/f_eval": model_hashes["models/f_eval"], "generate_config_hash": gen["config_hash"]}
    return write_manifest(out, "evaluate", config.section_hash("guidance", "ablation", "generate"), inputs,
                          {f"reports/{k}": v for k, v in tree_hashes(reports_dir).items()})


def _final_only(rep: MT.MetricsReport) -> MT.MetricsReport:
    return dataclasses.replace(rep, per_iteration=rep.per_iteration[-1:])


def load_reports(out: Path) -> dict[str, dict]:
    read_manifest(out, "evaluate", "metric reports")
    return {p.stem[len("metrics_"):]: json.loads(p.read_text())
            for p in sorted((out / "reports").glob("metrics_*.json"))}


STAGES = {
    "synth": cmd_synth,
    "train-diffusion": cmd_train_diffusion,
    "train-classifier": cmd_train_classifier,
    "train-oracle": cmd_train_oracle,
    "train-features": cmd_train_features,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def run_all(config: ExperimentConfig, jobs: int | None = None) -> None:
    for name, fn in STAGES.items():
        if name == "generate":
            fn(config, jobs=jobs)
        else:
            fn(config)
    from .report import cmd_report

    cmd_report(config)
