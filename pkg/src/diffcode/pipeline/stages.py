"""Three-stage training and inference.

Stage I trains the VQ autoencoder and codebook bank on clean images.
Stage II freezes it and trains the condition encoder plus the latent
denoiser. Stage III freezes both and trains the routed restoration network
on (LQ image, codebook reference) pairs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..codebook import (
    CodebookBank,
    DeadCodeTracker,
    lookup,
    rq_quantize,
    seed_codebook,
    stage1_loss,
    write_bank,
)
from ..diffusion import Denoiser, DiffusionSchedule, forward_diffuse, make_schedule, reverse_step, stage2_loss
from ..errors import ConfigError
from ..metrics import MetricReport, evaluate
from ..networks import (
    Decoder,
    Encoder,
    RestorationNet,
    TaskClassifier,
    stage3_loss,
)
from ..numerics import Tensor, backward, cross_entropy, l1_loss, straight_through
from ..rng import stream
from ..routing import GatingVector
from ..tasks import TaskSample, build_dataset, load_dataset, stack_batch
from .checkpoint import file_hash, load_checkpoint, params_hash, save_checkpoint
from .config import RunConfig
from .optim import Adam, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class Stage1:
    encoder: Encoder
    decoder: Decoder
    bank: CodebookBank
    history: list[float] = field(default_factory=list)
    ckpt_hash: str | None = None

    def state(self) -> dict[str, np.ndarray]:
        st = {f"encoder.{k}": v for k, v in self.encoder.state().items()}
        st.update({f"decoder.{k}": v for k, v in self.decoder.state().items()})
        for b in self.bank.books:
            st[f"bank.{b.task_id}.codes"] = b.codes.data
        return st

    def freeze(self) -> None:
        self.encoder.freeze()
        self.decoder.freeze()
        for b in self.bank.books:
            b.codes.requires_grad = False


@dataclass
class Stage2:
    cond_encoder: Encoder
    denoiser: Denoiser
    schedule: DiffusionSchedule
    latent_scale: float
    history: list[float] = field(default_factory=list)
    ckpt_hash: str | None = None

    def state(self) -> dict[str, np.ndarray]:
        st = {f"cond_encoder.{k}": v for k, v in self.cond_encoder.state().items()}
        st.update({f"denoiser.{k}": v.data for k, v in self.denoiser.named_parameters()})
        return st

    def freeze(self) -> None:
        self.cond_encoder.freeze()
        for p in self.denoiser.parameters():
            p.requires_grad = False


@dataclass
class Stage3:
    restorer: RestorationNet
    classifier: TaskClassifier | None
    history: list[float] = field(default_factory=list)
    ckpt_hash: str | None = None

    def state(self) -> dict[str, np.ndarray]:
        st = {f"restorer.{k}": v for k, v in self.restorer.state().items()}
        if self.classifier is not None:
            st.update({f"classifier.{k}": v for k, v in self.classifier.state().items()})
        return st


# ---------------------------------------------------------------------------
# data

def load_data(config: RunConfig) -> dict[str, list[TaskSample]]:
    if config.data_dir:
        root = Path(config.data_dir)
        return {split: load_dataset(root / split) for split in ("train", "val", "test")}
    d = config.data
    from ..tasks import DEFAULT_TASKS

    specs = [s for s in DEFAULT_TASKS if s.task_id in d.tasks]
    return build_dataset(config.seed, d.n_train, d.n_val, d.n_test, d.size, specs)


def _by_task(samples: list[TaskSample]) -> dict[int, list[TaskSample]]:
    out: dict[int, list[TaskSample]] = {}
    for s in samples:
        out.setdefault(s.task_id, []).append(s)
    return out


def _batch(samples: list[TaskSample], size: int, rng: np.random.Generator) -> list[TaskSample]:
    idx = rng.choice(len(samples), size=min(size, len(samples)), replace=False)
    return [samples[i] for i in np.sort(idx)]


def _T(x: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Stage I

def build_stage1(config: RunConfig) -> Stage1:
    dt = config.np_dtype
    cb = config.codebook
    rng = stream(config.seed, "stage1", "init", int(cb.shared))
    enc = Encoder(config.model, 1, cb.dim, rng, dt)
    dec = Decoder(config.model, cb.dim, rng, dt)
    bank = CodebookBank.create(config.data.tasks, cb.size, cb.dim, rng, shared=cb.shared, dtype=dt)
    return Stage1(enc, dec, bank)


def _seed_bank(s1: Stage1, config: RunConfig, by_task: dict[int, list[TaskSample]]) -> None:
    cb = config.codebook
    rng = stream(config.seed, "stage1", "seed-codes", int(cb.shared))
    for book in s1.bank.books:
        pool = [s for t in (config.data.tasks if s1.bank.shared else [book.task_id]) for s in by_task[t]]
        pick = _batch(pool, cb.warmup_images, rng)
        _, hq, _ = stack_batch(pick, config.np_dtype)
        z = s1.encoder(_T(hq, config.np_dtype)).data
        rows = np.moveaxis(z, 1, -1).reshape(-1, cb.dim)
        book.codes.data = seed_codebook(rows, cb.size, cb.depth, rng).astype(config.np_dtype)


def train_stage1(config: RunConfig, data=None, out_dir=None) -> Stage1:
    data = data or load_data(config)
    by_task = _by_task(data["train"])
    missing = [t for t in config.data.tasks if t not in by_task]
    if missing:
        raise ConfigError(f"no HQ training data for tasks {missing}")
    s1 = build_stage1(config)
    cb, opt_cfg, dt = config.codebook, config.stage1, config.np_dtype
    params = s1.encoder.parameters() + s1.decoder.parameters() + s1.bank.parameters()
    opt = Adam(params)
    rng = stream(config.seed, "stage1", "batches", int(cb.shared))
    trackers = {id(b): DeadCodeTracker(cb.size, cb.dead_code_patience) for b in s1.bank.books}
    tasks = config.data.tasks
    seeded = cb.warmup_iters == 0
    if seeded:
        _seed_bank(s1, config, by_task)
    for it in range(opt_cfg.iters):
        if not seeded and it == cb.warmup_iters:
            _seed_bank(s1, config, by_task)
            opt = Adam(params)
            seeded = True
        task = tasks[it % len(tasks)]
        _, hq, _ = stack_batch(_batch(by_task[task], opt_cfg.batch, rng), dt)
        image = _T(hq, dt)
        opt.zero_grad()
        z = s1.encoder(image)
        if not seeded:
            loss = l1_loss(image, s1.decoder(z))
        else:
            book = s1.bank.book_for(task)
            res = rq_quantize(z.data, book, cb.depth)
            z_q = lookup(book, res.indices)
            i_hat = s1.decoder(straight_through(z, z_q))
            loss = stage1_loss(image, i_hat, z, z_q, cb.delta)
        backward(loss)
        clip_grad_norm(opt.params, opt_cfg.clip_norm)
        opt.step(cosine_lr(it, opt_cfg.iters, opt_cfg.lr_start, opt_cfg.lr_end))
        if seeded:
            tracker = trackers[id(book)]
            dead = tracker.update(res.indices)
            if dead.size:
                tracker.reseed(book, dead, res.residuals[0], rng)
                opt.reset_rows(book.codes, dead)
        s1.history.append(float(loss.data))
    if out_dir is not None:
        s1.ckpt_hash = save_stage1(s1, config, out_dir)
    return s1


def save_stage1(s1: Stage1, config: RunConfig, out_dir) -> str:
    out_dir = Path(out_dir)
    meta = {"stage": 1, "config": config.to_dict(), "shared_bank": s1.bank.shared,
            "bank_tasks": s1.bank.task_ids, "final_loss": s1.history[-1] if s1.history else None}
    h = save_checkpoint(out_dir / "stage1.ckpt", s1.state(), meta)
    with open(out_dir / "bank.dcb", "wb") as fh:
        write_bank(fh, s1.bank)
    return h


def load_stage1(path, config: RunConfig) -> Stage1:
    params, meta = load_checkpoint(path)
    if meta.get("stage") != 1:
        raise ConfigError(f"{path} is not a stage-1 checkpoint")
    s1 = build_stage1(config.replace(**{"codebook.shared": meta["shared_bank"]}))
    s1.encoder.load_state({k[8:]: v for k, v in params.items() if k.startswith("encoder.")})
    s1.decoder.load_state({k[8:]: v for k, v in params.items() if k.startswith("decoder.")})
    for b in s1.bank.books:
        b.codes.data = params[f"bank.{b.task_id}.codes"].astype(config.np_dtype)
    s1.ckpt_hash = file_hash(path)
    return s1


# ---------------------------------------------------------------------------
# Stage II

def build_stage2(config: RunConfig, latent_scale: float = 1.0) -> Stage2:
    dt = config.np_dtype
    rng = stream(config.seed, "stage2", "init")
    cond = Encoder(config.model, 1, config.codebook.dim, rng, dt)
    d = config.diffusion
    den = Denoiser(config.codebook.dim, config.codebook.dim, d.hidden, d.T, rng, dt)
    return Stage2(cond, den, make_schedule(d.T, d.beta_start, d.beta_end), latent_scale)


def train_stage2(config: RunConfig, s1: Stage1, data=None, out_dir=None) -> Stage2:
    data = data or load_data(config)
    dt, opt_cfg = config.np_dtype, config.stage2
    before = params_hash(s1.state())
    s1.freeze()
    train = data["train"]
    _, hq_all, _ = stack_batch(train, dt)
    z_all = s1.encoder(_T(hq_all, dt)).data
    scale = float(z_all.std())
    s2 = build_stage2(config, scale)
    opt = Adam(s2.cond_encoder.parameters() + s2.denoiser.parameters())
    rng = stream(config.seed, "stage2", "batches")
    T = s2.schedule.T
    for it in range(opt_cfg.iters):
        idx = np.sort(rng.choice(len(train), size=min(opt_cfg.batch, len(train)), replace=False))
        lq, _, _ = stack_batch([train[i] for i in idx], dt)
        z = _T(z_all[idx] / scale, dt)
        opt.zero_grad()
        cond = s2.cond_encoder(_T(lq, dt))
        t = int(rng.integers(1, T + 1))
        eps = _T(rng.standard_normal(z.shape), dt)
        z_t = forward_diffuse(z, s2.schedule, t, eps)
        for step in range(t, 0, -1):
            noise = _T(rng.standard_normal(z.shape), dt) if step > 1 else None
            z_t = reverse_step(z_t, cond, step, s2.schedule, s2.denoiser, noise)
        loss = stage2_loss(z, z_t)
        backward(loss)
        clip_grad_norm(opt.params, opt_cfg.clip_norm)
        opt.step(cosine_lr(it, opt_cfg.iters, opt_cfg.lr_start, opt_cfg.lr_end))
        s2.history.append(float(loss.data))
    if params_hash(s1.state()) != before:
        raise RuntimeError("stage-1 parameters changed during stage 2")
    if out_dir is not None:
        s2.ckpt_hash = save_stage2(s2, config, out_dir, s1.ckpt_hash)
    return s2


def save_stage2(s2: Stage2, config: RunConfig, out_dir, parent_hash: str | None) -> str:
    meta = {"stage": 2, "config": config.to_dict(), "latent_scale": s2.latent_scale,
            "parents": {"stage1": parent_hash}, "final_loss": s2.history[-1] if s2.history else None}
    return save_checkpoint(Path(out_dir) / "stage2.ckpt", s2.state(), meta)


def load_stage2(path, config: RunConfig, s1: Stage1 | None = None) -> Stage2:
    params, meta = load_checkpoint(path)
    if meta.get("stage") != 2:
        raise ConfigError(f"{path} is not a stage-2 checkpoint")
    if s1 is not None and s1.ckpt_hash and meta["parents"]["stage1"] != s1.ckpt_hash:
        raise ConfigError("stage-2 checkpoint was trained on a different stage-1 checkpoint")
    s2 = build_stage2(config, meta["latent_scale"])
    s2.cond_encoder.load_state({k[13:]: v for k, v in params.items() if k.startswith("cond_encoder.")})
    for name, p in s2.denoiser.named_parameters():
        p.data = params[f"denoiser.{name}"].astype(config.np_dtype)
    s2.ckpt_hash = file_hash(path)
    return s2


def retrieve_latent(s2: Stage2, i_lq: np.ndarray, sample_ids, dtype, seed: int = 0) -> np.ndarray:
    """Infer-mode reverse chain from Gaussian noise, conditioned on the LQ images.

    All randomness for sample ``i`` comes from a stream keyed by its sample id,
    so the result does not depend on how samples are batched.
    """
    T = s2.schedule.T
    cond = s2.cond_encoder(_T(i_lq, dtype))
    shape = cond.shape[1:]
    draws = [stream(seed, "retrieve", int(sid)).standard_normal((T,) + shape) for sid in sample_ids]
    draws = np.stack(draws, axis=1).astype(dtype)  # [T, N, C, h, w]
    z = Tensor(draws[0])
    for t in range(T, 0, -1):
        noise = Tensor(draws[T - t + 1]) if t > 1 else None
        z = reverse_step(z, cond, t, s2.schedule, s2.denoiser, noise)
    return z.data * s2.latent_scale


# ---------------------------------------------------------------------------
# references and Stage III

def make_references(mode: str, s1: Stage1, s2: Stage2 | None, i_lq: np.ndarray, book_tasks,
                    sample_ids, config: RunConfig) -> np.ndarray:
    """Restoration references for a batch of LQ images.

    ``none`` passes the LQ image through, ``direct`` quantizes the Stage-I
    encoding of the LQ image, ``diffusion`` quantizes the latent retrieved by
    the reverse chain. Codes come from the book of ``book_tasks[i]``.
    """
    dt = config.np_dtype
    if mode == "none":
        return i_lq.copy()
    if mode == "direct":
        z = s1.encoder(_T(i_lq, dt)).data
    elif mode == "diffusion":
        if s2 is None:
            raise ConfigError("diffusion references need a stage-2 model")
        z = retrieve_latent(s2, i_lq, sample_ids, dt, config.seed)
    else:
        raise ConfigError(f"unknown reference mode {mode!r}")
    zq = np.empty_like(z)
    for i, t in enumerate(book_tasks):
        zq[i] = rq_quantize(z[i], s1.bank.book_for(int(t)), config.codebook.depth).quantized
    return s1.decoder(_T(zq, dt)).data


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def references_for(samples: list[TaskSample], mode: str, s1, s2, config: RunConfig, book_tasks=None) -> np.ndarray:
    lq, _, tasks = stack_batch(samples, config.np_dtype)
    book_tasks = tasks if book_tasks is None else np.asarray(book_tasks)
    ids = [s.sample_id for s in samples]
    out = [make_references(mode, s1, s2, lq[sl], book_tasks[sl], ids[sl], config) for sl in _chunks(len(samples), 32)]
    return np.concatenate(out)


def needs_classifier(config: RunConfig) -> bool:
    return config.routing.enabled or config.reference != "none"


def build_stage3(config: RunConfig) -> Stage3:
    dt = config.np_dtype
    experts = config.routing.experts if config.routing.enabled else 1
    restorer = RestorationNet(config.model, experts, stream(config.seed, "stage3", "init"), dt)
    classifier = None
    if needs_classifier(config):
        classifier = TaskClassifier(config.routing.experts, stream(config.seed, "stage3", "classifier"),
                                    config.routing.classifier_width, dt)
    return Stage3(restorer, classifier)


def gate_for(s3: Stage3, config: RunConfig, image: Tensor) -> tuple[GatingVector, Tensor | None]:
    logits = s3.classifier(image) if s3.classifier is not None else None
    if config.routing.enabled:
        return GatingVector(logits, k=config.routing.k), logits
    n = image.shape[0]
    return GatingVector(Tensor(np.zeros((n, 1), dtype=image.dtype)), k=1), logits


def train_stage3(config: RunConfig, s1: Stage1 | None, s2: Stage2 | None, data=None, out_dir=None,
                 references: np.ndarray | None = None) -> Stage3:
    data = data or load_data(config)
    dt, opt_cfg = config.np_dtype, config.stage3
    if config.reference != "none" and s1 is None:
        raise ConfigError("codebook references need a stage-1 model")
    if config.reference == "diffusion" and s2 is None:
        raise ConfigError("diffusion references need a stage-2 model")
    for s in (s1, s2):
        if s is not None:
            s.freeze()
    train = data["train"]
    lq_all, hq_all, tasks_all = stack_batch(train, dt)
    refs = references if references is not None else references_for(train, config.reference, s1, s2, config)
    s3 = build_stage3(config)
    params = s3.restorer.parameters() + (s3.classifier.parameters() if s3.classifier is not None else [])
    opt = Adam(params)
    rng = stream(config.seed, "stage3", "batches")
    for it in range(opt_cfg.iters):
        idx = np.sort(rng.choice(len(train), size=min(opt_cfg.batch, len(train)), replace=False))
        i_lq = _T(lq_all[idx], dt)
        opt.zero_grad()
        gate, logits = gate_for(s3, config, i_lq)
        i_hat = s3.restorer(i_lq, _T(refs[idx], dt), gate)
        loss = stage3_loss(_T(hq_all[idx], dt), i_hat)
        if logits is not None:
            loss = loss + config.routing.aux_weight * cross_entropy(logits, tasks_all[idx])
        backward(loss)
        clip_grad_norm(opt.params, opt_cfg.clip_norm)
        opt.step(cosine_lr(it, opt_cfg.iters, opt_cfg.lr_start, opt_cfg.lr_end))
        s3.history.append(float(loss.data))
    if out_dir is not None:
        parents = {"stage1": s1.ckpt_hash if s1 else None, "stage2": s2.ckpt_hash if s2 else None}
        meta = {"stage": 3, "config": config.to_dict(), "parents": parents,
                "final_loss": s3.history[-1] if s3.history else None}
        s3.ckpt_hash = save_checkpoint(Path(out_dir) / "stage3.ckpt", s3.state(), meta)
    return s3


def load_stage3(path, config: RunConfig, s1: Stage1 | None = None, s2: Stage2 | None = None) -> Stage3:
    params, meta = load_checkpoint(path)
    if meta.get("stage") != 3:
        raise ConfigError(f"{path} is not a stage-3 checkpoint")
    for name, s in (("stage1", s1), ("stage2", s2)):
        want = meta["parents"].get(name)
        if s is not None and s.ckpt_hash and want and want != s.ckpt_hash:
            raise ConfigError(f"stage-3 checkpoint was trained on a different {name} checkpoint")
    s3 = build_stage3(config)
    s3.restorer.load_state({k[9:]: v for k, v in params.items() if k.startswith("restorer.")})
    if s3.classifier is not None:
        s3.classifier.load_state({k[11:]: v for k, v in params.items() if k.startswith("classifier.")})
    s3.ckpt_hash = file_hash(path)
    return s3


# ---------------------------------------------------------------------------
# inference

@dataclass
class Prediction:
    restored: np.ndarray
    references: np.ndarray
    predicted_task: np.ndarray
    expert: np.ndarray
    w_max: np.ndarray
    sample_ids: list[int]


def predict_task(logits: np.ndarray, tasks: list[int]) -> np.ndarray:
    """Task whose logit is largest among the registered tasks (expert e <-> task e)."""
    sub = logits[:, tasks]
    return np.asarray(tasks)[np.argmax(sub, axis=1)]


def infer(config: RunConfig, s1, s2, s3: Stage3, samples) -> Prediction:
    """Restore LQ images. Only ``i_lq`` and ``sample_id`` of each sample are read."""
    dt = config.np_dtype
    outs, refs, preds, experts, wmax, ids = [], [], [], [], [], []
    samples = list(samples)
    for sl in _chunks(len(samples), 32):
        chunk = samples[sl]
        lq = np.stack([s.i_lq for s in chunk])[:, None].astype(dt)
        sid = [s.sample_id for s in chunk]
        image = _T(lq, dt)
        gate, logits = gate_for(s3, config, image)
        if logits is not None:
            pred = predict_task(logits.data, config.data.tasks)
        else:
            pred = np.full(len(chunk), -1)
        ref = make_references(config.reference, s1, s2, lq, pred, sid, config)
        out = s3.restorer(image, _T(ref, dt), gate)
        outs.append(out.data)
        refs.append(ref)
        preds.append(pred)
        experts.append(gate.selection()[:, 0])
        wmax.append(gate.weights().data.max(axis=1))
        ids += sid
    return Prediction(np.concatenate(outs), np.concatenate(refs), np.concatenate(preds),
                      np.concatenate(experts), np.concatenate(wmax), ids)


def evaluate_prediction(pred: Prediction, samples: list[TaskSample], peak: float = 1.0) -> MetricReport:
    return evaluate([p[0] for p in pred.restored], [s.i_hq for s in samples], [s.task_id for s in samples], peak)


def routing_audit(pred: Prediction, samples: list[TaskSample]) -> str:
    """One ``sample_id task_id argmax_expert w_max`` line per sample."""
    return "\n".join(f"{sid} {s.task_id} {e} {w:.6f}"
                     for sid, s, e, w in zip(pred.sample_ids, samples, pred.expert, pred.w_max))


def routing_consistency(pred: Prediction, samples: list[TaskSample]) -> float:
    """Fraction of samples whose task's majority expert matches their own expert."""
    tasks = np.array([s.task_id for s in samples])
    hits = 0
    for t in np.unique(tasks):
        e = pred.expert[tasks == t]
        hits += int((e == np.bincount(e).argmax()).sum())
    return hits / len(samples)


def decoded_reconstruction(s1: Stage1, images: np.ndarray, tasks, config: RunConfig) -> np.ndarray:
    """Encode, residual-quantize with each image's book, decode."""
    dt = config.np_dtype
    z = s1.encoder(_T(images, dt)).data
    zq = np.stack([rq_quantize(z[i], s1.bank.book_for(int(t)), config.codebook.depth).quantized
                   for i, t in enumerate(tasks)])
    return s1.decoder(_T(zq, dt)).data


def latent_l1(s1: Stage1, s2: Stage2, samples: list[TaskSample], config: RunConfig) -> float:
    """Mean |z - z_hat| between the clean latent and the infer-mode retrieval."""
    lq, hq, _ = stack_batch(samples, config.np_dtype)
    z = s1.encoder(_T(hq, config.np_dtype)).data
    z_hat = np.concatenate([retrieve_latent(s2, lq[sl], [s.sample_id for s in samples[sl]],
                                            config.np_dtype, config.seed)
                            for sl in _chunks(len(samples), 32)])
    return float(np.mean(np.abs(z - z_hat)) / s2.latent_scale)


__all__ = [
    "Stage1", "Stage2", "Stage3", "Prediction", "load_data", "train_stage1", "train_stage2", "train_stage3",
    "load_stage1", "load_stage2", "load_stage3", "make_references", "references_for", "infer",
    "evaluate_prediction", "routing_audit", "routing_consistency", "retrieve_latent", "latent_l1",
    "decoded_reconstruction",
]
