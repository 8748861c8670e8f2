"""Training loop, evaluation harness and enrollment-composition sweep."""
from __future__ import annotations

import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .enrollment import select_enrollment
from .metrics import tcp_wer_details, SegListEntry, token_runs_to_words
from .model import IGNORE_INDEX, EncoderConfig, SEDiCoW, loss as model_loss
from .stno import (
    StnoMask,
    compute_stno,
    joint_spec_augment,
    resample_stno,
    stno_gaussian_noise,
    stno_segment_flip,
)
from .synth import SynthConfig, generate_mixture, make_enrollment, token_table

SWEEP_INTERFERERS = (0, 1, 2)
SWEEP_OVERLAPS = (0.0, 0.25, 0.5, 0.75, 1.0)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    n_speakers: int = 2
    # optimizer (Adam, default decay constants)
    base_lr: float = 5e-3
    warmup_steps: int = 200
    total_steps: int = 4000
    batch_size: int = 48
    # STNO augmentations
    mask_noise: bool = True
    mask_noise_sigma: float = 0.2
    mask_noise_prob: float = 0.75
    segment_flip: bool = True
    segment_flip_prob: float = 0.3
    segment_flip_len: tuple[float, float] = (0.1, 1.0)
    segment_flip_class_prob: float = 0.1
    spec_augment: bool = True
    spec_time_masks: int = 2
    spec_max_time: int = 5
    spec_freq_masks: int = 2
    spec_max_freq: int = 3
    # bookkeeping
    eval_every: int = 500
    eval_samples: int = 200
    eval_seed: int = 10_000
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = EncoderConfig(**self.model)
        if isinstance(self.data, dict):
            self.data = SynthConfig(**self.data)
        self.segment_flip_len = tuple(self.segment_flip_len)
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.model.n_features != self.data.n_features or self.model.vocab != self.data.vocab:
            raise ValueError("model and data disagree on n_features or vocab")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        """Build from flat keys; nested fields use dotted names (``model.d_model``)."""
        top, nested = {}, {"model": {}, "data": {}}
        known = {f.name for f in fields(cls)}
        for key, value in flat.items():
            head, _, rest = key.partition(".")
            if rest:
                if head not in nested:
                    raise KeyError(f"unknown config section {head!r}")
                nested[head][rest] = value
            elif key in known and key not in nested:
                top[key] = value
            else:
                raise KeyError(f"unknown config key {key!r}")
        return cls(model=EncoderConfig(**nested["model"]), data=SynthConfig(**nested["data"]), **top)


def lr_at(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    step = min(step, total)
    if step < warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# batches -----------------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray  # (B, T0, F)
    stno: np.ndarray  # (B, T, 4) at the encoder rate
    targets: np.ndarray  # (B, T)
    enroll_features: np.ndarray | None = None
    enroll_stno: np.ndarray | None = None
    identical_stno: np.ndarray | None = None  # (B,) both targets share one mask

    def __len__(self):
        return self.features.shape[0]


def encoder_rate(cfg: RunConfig) -> float:
    return cfg.data.frame_rate / cfg.model.stride


def enrollment_segment(features, activity, cfg: RunConfig):
    """Self-enrollment: the window of the enrollment mixture richest in target-only speech."""
    mask = compute_stno(activity, 0)
    window = select_enrollment(mask.values[:, 1], cfg.model.enroll_window * cfg.model.stride)
    seg = features[window.t_start:window.t_end]
    seg_mask = StnoMask(mask.frame_rate, mask.values[window.t_start:window.t_end])
    return seg, resample_stno(seg_mask, encoder_rate(cfg)).values


def _prepare(sample, cfg: RunConfig, rng: np.random.Generator | None, augment: bool):
    """Main-stream features, encoder-rate STNO and targets for one sample."""
    stride = cfg.model.stride
    features = sample.features
    mask = compute_stno(sample.activity, sample.target)
    targets = sample.transcripts[sample.target].copy()
    if augment:
        if cfg.mask_noise:
            mask = stno_gaussian_noise(mask, cfg.mask_noise_sigma, cfg.mask_noise_prob, rng)
        if cfg.segment_flip:
            mask = stno_segment_flip(
                mask, cfg.segment_flip_prob, cfg.segment_flip_len, cfg.segment_flip_class_prob, rng
            )
        if cfg.spec_augment:
            features, mask, spans = joint_spec_augment(
                features, mask, cfg.spec_time_masks, cfg.spec_max_time,
                cfg.spec_freq_masks, cfg.spec_max_freq, rng, return_time_spans=True,
            )
            for start, stop in spans:
                targets[start:stop] = IGNORE_INDEX
    pooled = resample_stno(mask, encoder_rate(cfg)).values
    return features, pooled, targets[::stride]


def make_batch(samples, cfg: RunConfig, rng=None, augment: bool = False) -> Batch:
    parts = [_prepare(s, cfg, rng, augment) for s in samples]
    batch = Batch(
        features=np.stack([p[0] for p in parts]),
        stno=np.stack([p[1] for p in parts]),
        targets=np.stack([p[2] for p in parts]),
    )
    if cfg.model.use_enrollment:
        enroll = [enrollment_segment(s.enrollment_features, s.enrollment_activity, cfg) for s in samples]
        batch.enroll_features = np.stack([e[0] for e in enroll])
        batch.enroll_stno = np.stack([e[1] for e in enroll])
    batch.identical_stno = np.array([_shares_mask(s) for s in samples])
    return batch


def _shares_mask(sample) -> bool:
    """True when some other speaker has exactly the target's STNO mask."""
    m = sample.activity
    mine = compute_stno(m, sample.target).values
    return any(
        np.array_equal(mine, compute_stno(m, k).values)
        for k in range(len(m.speakers)) if k != sample.target
    )


def sample_batch(cfg: RunConfig, rng: np.random.Generator, table, n: int | None = None) -> list:
    n = cfg.batch_size if n is None else n
    return [
        generate_mixture(cfg.n_speakers, rng, cfg.data, table=table, with_enrollment=cfg.model.use_enrollment)
        for _ in range(n)
    ]


def forward_batch(model: SEDiCoW, batch: Batch):
    return model(batch.features, batch.stno, batch.enroll_features, batch.enroll_stno)


# training -----------------------------------------------------------------------


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def version_string() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return f"sedicow-{version('artifact')}"
    except PackageNotFoundError:
        return "sedicow-unknown"


def write_manifest(out: Path, cfg_dict: dict, seed: int, metrics: dict, files: list[Path]) -> Path:
    manifest = {
        "version": version_string(),
        "seed": seed,
        "config": cfg_dict,
        "metrics": metrics,
        "files": {p.name: _digest(p) for p in files if p.exists()},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def train(cfg: RunConfig, log=None, verbose: bool = False) -> SEDiCoW:
    """Train from scratch; writes checkpoint, JSONL log and manifest to ``cfg.output_dir``.

    Deterministic given ``cfg.seed``: data, augmentation and initialization
    draw from separate child streams of one seed.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    init_seq, data_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    model = SEDiCoW(cfg.model, seed=int(init_seq.generate_state(1)[0]))
    data_rng, aug_rng = np.random.default_rng(data_seq), np.random.default_rng(aug_seq)
    table = token_table(cfg.data)
    params = model.parameters()
    opt = Adam(params)
    log_path = out / "train_log.jsonl"
    eval_set = None
    started = time.time()
    with open(log_path, "w") as fh:
        for step in range(cfg.total_steps):
            batch = make_batch(sample_batch(cfg, data_rng, table), cfg, aug_rng, augment=True)
            model.zero_grad()
            value = model_loss(forward_batch(model, batch), batch.targets)
            loss_value = value.item()
            if not math.isfinite(loss_value):
                _dump_diagnostics(out, step, loss_value, model)
                raise TrainingError(f"non-finite loss {loss_value} at step {step}")
            value.backward()
            lr = lr_at(step + 1, cfg.base_lr, cfg.warmup_steps, cfg.total_steps)
            opt.step(lr)
            record = {"step": step + 1, "loss": loss_value, "lr": lr}
            if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.total_steps):
                if eval_set is None:
                    eval_set = eval_samples(cfg, cfg.eval_samples)
                record["eval_acc"] = evaluate(model, cfg, samples=eval_set)["accuracy"]
                if verbose:
                    print(f"step {step + 1} loss {loss_value:.4f} acc {record['eval_acc']:.4f} "
                          f"({time.time() - started:.0f}s)", file=sys.stderr, flush=True)
            fh.write(json.dumps(record) + "\n")
            if log is not None:
                log(record)
    ckpt = out / "checkpoint.json"
    model.save(ckpt, {"seed": cfg.seed, "steps": cfg.total_steps})
    write_manifest(out, cfg.to_dict(), cfg.seed, {}, [ckpt, log_path])
    return model


def _dump_diagnostics(out: Path, step: int, value: float, model: SEDiCoW):
    norms = {}
    for name, p in model.named_parameters().items():
        norms[name] = float(np.linalg.norm(p.data)) if np.all(np.isfinite(p.data)) else "non-finite"
    (out / "diagnostics.json").write_text(json.dumps({"step": step, "loss": repr(value), "param_norms": norms}, indent=1))


# evaluation -----------------------------------------------------------------------


def eval_samples(cfg: RunConfig, n: int, seed: int | None = None, overlap_range=None) -> list:
    rng = np.random.default_rng(cfg.eval_seed if seed is None else seed)
    table = token_table(cfg.data)
    return [
        generate_mixture(cfg.n_speakers, rng, cfg.data, overlap_range=overlap_range, table=table,
                         with_enrollment=cfg.model.use_enrollment)
        for _ in range(n)
    ]


def predict(model: SEDiCoW, batch: Batch, chunk: int = 64) -> np.ndarray:
    preds = []
    with ag.no_grad():
        for i in range(0, len(batch), chunk):
            sub = Batch(
                batch.features[i:i + chunk], batch.stno[i:i + chunk], batch.targets[i:i + chunk],
                None if batch.enroll_features is None else batch.enroll_features[i:i + chunk],
                None if batch.enroll_stno is None else batch.enroll_stno[i:i + chunk],
            )
            preds.append(forward_batch(model, sub).data.argmax(axis=-1))
    return np.concatenate(preds)


def _accuracy(preds, targets) -> float:
    valid = targets != IGNORE_INDEX
    return float((preds[valid] == targets[valid]).mean()) if valid.any() else float("nan")


def score_batch(model: SEDiCoW, batch: Batch, rate: float) -> dict:
    preds = predict(model, batch)
    targets = batch.targets
    errors = ref_words = 0
    for p, t, m in zip(preds, targets, batch.stno):
        # hypothesis words only where the mask says the target speaks
        speaking = (m[:, 1] + m[:, 3]) > 0.5
        hyp = token_runs_to_words(np.where(speaking, p, IGNORE_INDEX), rate)
        ref = token_runs_to_words(t, rate)
        res = tcp_wer_details([SegListEntry("target", ref)], [SegListEntry("target", hyp)])
        errors += res.errors
        ref_words += res.ref_len
    ident = batch.identical_stno
    return {
        "accuracy": _accuracy(preds, targets),
        "ambiguous_accuracy": _accuracy(preds[ident], targets[ident]) if ident.any() else None,
        "ambiguous_samples": int(ident.sum()),
        "tcpwer": errors / ref_words if ref_words else 0.0,
        "samples": len(batch),
    }


def evaluate(model: SEDiCoW, cfg: RunConfig, samples=None, n: int | None = None) -> dict:
    """Frame accuracy, tcpWER and identical-mask accuracy on a held-out set."""
    if model.cfg.n_features != cfg.data.n_features or model.cfg.vocab != cfg.data.vocab:
        raise ValueError("checkpoint dimensions do not match the evaluation config")
    if samples is None:
        samples = eval_samples(cfg, cfg.eval_samples if n is None else n)
    eval_cfg = cfg if model.cfg.use_enrollment == cfg.model.use_enrollment else _with_model(cfg, model.cfg)
    return score_batch(model, make_batch(samples, eval_cfg), encoder_rate(cfg))


def _with_model(cfg: RunConfig, model_cfg: EncoderConfig) -> RunConfig:
    d = cfg.to_dict()
    d["model"] = asdict(model_cfg)
    return RunConfig(**d)


def sweep(model: SEDiCoW, cfg: RunConfig, n: int | None = None,
          interferers=SWEEP_INTERFERERS, overlaps=SWEEP_OVERLAPS) -> dict:
    """Accuracy over enrollment composition x enrollment overlap with the target.

    Every cell reuses the same main mixtures and the same enrollment
    speakers and utterances; only the enrollment composition changes.
    """
    if not model.cfg.use_enrollment:
        raise ValueError("the sweep needs a model with enrollment fusion")
    n = cfg.eval_samples if n is None else n
    samples = eval_samples(cfg, n)
    table = token_table(cfg.data)
    grid = []
    for k in interferers:
        row = []
        for rho in overlaps:
            for i, s in enumerate(samples):
                rng = np.random.default_rng([cfg.eval_seed, 1, i])
                s.enrollment_features, s.enrollment_activity = make_enrollment(
                    s.profiles[s.target], rng, cfg.data, table, n_interferers=k, overlap=rho
                )
            row.append(score_batch(model, make_batch(samples, cfg), encoder_rate(cfg))["accuracy"])
        grid.append(row)
    return {
        "rows": [f"target + {k} interferer{'s' if k != 1 else ''}" for k in interferers],
        "interferers": list(interferers),
        "overlaps": list(overlaps),
        "accuracy": grid,
    }


def format_sweep(result: dict) -> str:
    head = "composition\t" + "\t".join(f"{int(round(100 * o))}%" for o in result["overlaps"])
    lines = [head]
    for name, row in zip(result["rows"], result["accuracy"]):
        lines.append(name + "\t" + "\t".join(f"{a:.4f}" for a in row))
    return "\n".join(lines) + "\n"
