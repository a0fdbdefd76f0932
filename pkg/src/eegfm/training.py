"""Training loops: masked pretraining, lobe-pooled fine-tuning, evaluation,
ablation sweeps, and the gradient-check suite.

Every run directory receives a resolved config snapshot, the seed, a content
hash of the package sources, telemetry (JSON lines), a loss curve (CSV) and a
byte-stable checkpoint — enough to re-execute the run exactly.  All
randomness flows from labeled stream splits keyed on (seed, purpose, step),
so interrupting and resuming from a checkpoint replays the identical
trajectory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
import warnings
from pathlib import Path

import numpy as np
import torch
from scipy import signal as sp_signal
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from . import data as dataio
from . import geometry, iilp, masking, metrics, pipeline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config
from .model import EEGModel, ModelConfig, init_parameters, load_state_arrays, state_arrays
from .numerics import NumericalError, RngStream, seeded_stream
from .objectives import ClassPrior, balbce_loss, recon_loss, total_pretrain_loss
from .pipeline import BANDS, EEGSample, PreprocessConfig, SynthSpec
from .pmoe import aux_loss

CHECKPOINT_NAME = "checkpoint.bin"


# ---------------------------------------------------------------------------
# run-directory bookkeeping


def content_hash() -> str:
    """SHA-256 over the package sources, recorded with every run."""
    root = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def prepare_run_dir(cfg: RunConfig, mode: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(dump_config(cfg))
    info = {"mode": mode, "seed": cfg.seed, "content_hash": content_hash()}
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return out


def resolve_layout(cfg: RunConfig) -> tuple[geometry.ElectrodeLayout, geometry.LobePartition]:
    if cfg.layout.endswith(".txt"):
        layout, partition = geometry.load_layout_file(cfg.layout)
    else:
        layout = geometry.builtin_layout(cfg.layout)
        partition = geometry.default_lobes(layout)
    if cfg.pooling != "lobes" and cfg.pooling != "none":
        if cfg.pooling not in geometry.PARTITION_BUILDERS:
            raise ConfigError(f"unknown pooling {cfg.pooling!r}")
        partition = geometry.PARTITION_BUILDERS[cfg.pooling](layout)
    return layout, partition


def torch_dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.precision == "fp64" else torch.float32


def make_model(cfg: RunConfig, layout: geometry.ElectrodeLayout) -> EEGModel:
    model = EEGModel(cfg.model, layout, dtype=torch_dtype(cfg))
    init_parameters(model, seeded_stream(cfg.seed).split("init"))
    return model


# ---------------------------------------------------------------------------
# synthetic data


def default_class_signatures(n_classes: int) -> list[dict[str, float]]:
    """Spectrally separable classes: each boosts one band and damps the
    next class's band, so any two classes differ in two bands."""
    bands = ["alpha", "beta", "theta", "delta"]
    cycle = min(max(n_classes, 2), len(bands))
    sigs = []
    for c in range(n_classes):
        boost = bands[c % cycle]
        damp = bands[(c + 1) % cycle]
        sigs.append({boost: 2.0, damp: 0.25})
    return sigs


def build_synth_samples(
    layout: geometry.ElectrodeLayout,
    n: int,
    seed: int,
    n_classes: int = 0,
    data_length: int = 256,
    spike_rate: float = 0.2,
    noise_std: float = 2.0,
    burst_envelope_hz: float = 2.0,
) -> list[EEGSample]:
    """Model-ready companded segments from the full synthesis+preprocess chain.

    Raw 4 s recordings at 256 Hz run through the standard pipeline; rejected
    segments are replaced so exactly ``n`` survive.
    """
    partition = geometry.default_lobes(layout)
    lobe_gain = {name: g for name, g in zip(partition.lobe_names, [1.0, 1.1, 0.9, 1.05, 0.95])}
    spec = SynthSpec(
        spike_rate=spike_rate,
        spike_amplitude=25.0,
        lobe_gain=lobe_gain,
        class_signatures=default_class_signatures(n_classes) if n_classes else None,
        noise_std=noise_std,
        burst_envelope_hz=burst_envelope_hz,
    )
    cfg = PreprocessConfig(target_rate=64.0, window_seconds=data_length / 64.0)
    rng = seeded_stream(seed).split("synth")
    kept: list[EEGSample] = []
    while len(kept) < n:
        batch = pipeline.synth_dataset(
            spec, min(64, n), rng, layout, partition,
            duration=data_length / 64.0, rate=256.0,
        )
        for raw in batch:
            segments = pipeline.preprocess(raw, cfg)
            good, _ = pipeline.quality_filter(segments)
            for seg in good:
                if len(kept) < n:
                    kept.append(pipeline.normalize_segment(seg))
        if not batch:
            break
    return kept


def dataset_values(samples: list[EEGSample]) -> np.ndarray:
    return np.stack([s.values for s in samples])


def dataset_labels(samples: list[EEGSample]) -> np.ndarray:
    if any(s.label is None for s in samples):
        raise ValueError("dataset has unlabeled samples")
    return np.array([s.label for s in samples], dtype=np.int64)


def load_or_synth(cfg: RunConfig, split: str | None, labeled: bool) -> list[EEGSample]:
    if cfg.dataset:
        if split is None:
            manifest = dataio.load_manifest(cfg.dataset)
            split = "train" if "train" in manifest["splits"] else next(iter(manifest["splits"]))
        return dataio.load_split(cfg.dataset, split)
    layout, _ = resolve_layout(cfg)
    if len(layout) != cfg.channels:
        raise ConfigError(
            f"data.channels={cfg.channels} but layout {cfg.layout!r} has {len(layout)}"
        )
    n_classes = cfg.n_classes if labeled else cfg.synth_classes
    samples = build_synth_samples(
        layout, cfg.synth_segments, cfg.synth_seed,
        n_classes=n_classes, data_length=cfg.data_length,
    )
    if split is None:
        return samples
    n = len(samples)
    bounds = {"train": (0, int(0.7 * n)), "val": (int(0.7 * n), int(0.85 * n)), "test": (int(0.85 * n), n)}
    if split not in bounds:
        raise ConfigError(f"unknown split {split!r}")
    lo, hi = bounds[split]
    return samples[lo:hi]


# ---------------------------------------------------------------------------
# pretraining


def _batch_masks(cfg: RunConfig, x: np.ndarray, step_rng: RngStream):
    """Per-sample dynamic-ratio masks, coarsened per layer, plus plans."""
    B = x.shape[0]
    merge = cfg.model.merge_factors
    per_layer = [[] for _ in merge]
    plans = []
    flat_masks = []
    for b in range(B):
        ratio = cfg.mask_ratios[int(step_rng.integers(0, len(cfg.mask_ratios)))]
        fn = masking.aamp_mask if cfg.mask_strategy == "aamp" else masking.random_mask
        spec = fn(x[b], ratio, step_rng)
        plans.append(masking.corruption_plan(spec, step_rng))
        layered = masking.coarsen(spec, merge)
        for l, m in enumerate(layered.masks):
            per_layer[l].append(m)
        flat_masks.append(spec.mask)
    stacked = [torch.as_tensor(np.stack(group)) for group in per_layer]
    return stacked, plans, np.stack(flat_masks)


def _optimizer_arrays(opt: torch.optim.Optimizer, params: list[torch.nn.Parameter]) -> dict:
    arrays = {}
    for i, p in enumerate(params):
        state = opt.state.get(p)
        if not state:
            continue
        arrays[f"opt.{i}.step"] = np.array([float(state["step"])], dtype=np.float64)
        arrays[f"opt.{i}.exp_avg"] = state["exp_avg"].detach().numpy()
        arrays[f"opt.{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
    return arrays


def _restore_optimizer(opt, params, arrays) -> None:
    for i, p in enumerate(params):
        key = f"opt.{i}.exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"opt.{i}.step"][0])),
            "exp_avg": torch.as_tensor(arrays[key]).to(p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(arrays[f"opt.{i}.exp_avg_sq"]).to(p.dtype).clone(),
        }


def _make_scheduler(cfg: RunConfig, opt, total_steps: int, done_steps: int = 0):
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt,
        max_lr=cfg.maximum_learning_rate,
        total_steps=total_steps,
        pct_start=cfg.warm_up_ratio,
        div_factor=cfg.div_factor,
        final_div_factor=cfg.final_div_factor,
        anneal_strategy="cos",
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(done_steps):
            sched.step()
    return sched


def save_train_checkpoint(path, cfg, model, opt, params, step, extra=None) -> None:
    arrays = dict(state_arrays(model))
    arrays.update(_optimizer_arrays(opt, params))
    meta = {
        "kind": "train",
        "seed": cfg.seed,
        "step": step,
        "config": dump_config(cfg),
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    if extra:
        meta.update(extra)
    save_checkpoint(path, arrays, meta)


def load_model_from_checkpoint(path, layout=None):
    """Rebuild the model (and return leftovers) from a checkpoint file."""
    from .config import apply_pairs, parse_config_text

    arrays, meta = load_checkpoint(path)
    cfg = RunConfig()
    apply_pairs(cfg, parse_config_text(meta["config"]))
    if layout is None:
        layout, _ = resolve_layout(cfg)
    model = EEGModel(cfg.model, layout, dtype=torch.float64 if meta.get("dtype") == "float64" else torch.float32)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    load_state_arrays(model, model_arrays)
    return model, cfg, arrays, meta


class TelemetryWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _gate_telemetry(cfg: RunConfig, gates) -> dict:
    """Label the flat gate list as enc<layer>.<stage> in forward order."""
    labels = []
    for l, count in enumerate(cfg.model.expert_counts):
        if count >= 1:
            labels.extend([f"enc{l}.time", f"enc{l}.space"])
    record = {}
    for label, gate in zip(labels, gates):
        record[label] = {
            "importance": [round(float(v), 6) for v in gate.importance.detach()],
            "load": [int(v) for v in gate.load],
        }
    return record


def run_pretrain(
    cfg: RunConfig,
    resume: str | None = None,
    samples: list[EEGSample] | None = None,
    stop_after: int | None = None,
    layout: geometry.ElectrodeLayout | None = None,
) -> dict:
    """Minimize the masked-reconstruction objective; returns a summary dict.

    ``stop_after`` interrupts the run once that many optimizer steps have
    completed (checkpointing first), without shortening the learning-rate
    schedule; resuming from the checkpoint replays the uninterrupted
    trajectory exactly.  ``samples``/``layout`` bypass dataset resolution
    (library callers with in-memory data).
    """
    out = prepare_run_dir(cfg, "pretrain")
    if layout is None:
        layout, _ = resolve_layout(cfg)
    if samples is None:
        samples = load_or_synth(cfg, None, labeled=False)
    values = dataset_values(samples)
    n = len(samples)
    if n < cfg.batch_size:
        raise ConfigError(f"dataset has {n} samples, batch size is {cfg.batch_size}")

    model = make_model(cfg, layout)
    params = list(model.parameters())
    opt = torch.optim.AdamW(
        params,
        lr=cfg.maximum_learning_rate,
        betas=cfg.adamw_betas,
        weight_decay=cfg.weight_decay,
    )
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.steps_total(n)
    start_step = 0
    if resume:
        arrays, meta = load_checkpoint(resume)
        load_state_arrays(model, {k: v for k, v in arrays.items() if not k.startswith("opt.")})
        _restore_optimizer(opt, params, arrays)
        start_step = int(meta["step"])
    sched = _make_scheduler(cfg, opt, total_steps, done_steps=start_step)

    root = seeded_stream(cfg.seed)
    telemetry = TelemetryWriter(out / "telemetry.jsonl", append=start_step > 0)
    curve_path = out / "loss_curve.csv"
    if start_step == 0 or not curve_path.exists():
        curve_path.write_text("step,reconstruction,auxiliary,total,lr\n")
    dtype = torch_dtype(cfg)
    initial_loss = None
    final_loss = None
    started = time.time()

    ckpt_path = out / CHECKPOINT_NAME
    if start_step == 0:
        save_train_checkpoint(ckpt_path, cfg, model, opt, params, 0)

    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        order = root.split(f"order/epoch{epoch}").permutation(n)
        idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        x_np = values[idx]
        step_rng = root.split(f"step{step}")
        layer_masks, plans, flat = _batch_masks(cfg, x_np, step_rng)
        x = torch.as_tensor(x_np, dtype=dtype)
        gates: list = []
        xhat = model.reconstruct(x, layer_masks, plans, rng=step_rng, training=True, gates=gates)
        rec = recon_loss(x, xhat, cfg.p_norm, mask=flat if cfg.masked_loss_only else None)
        aux = aux_loss(gates, cfg.w_importance)
        total, breakdown = total_pretrain_loss(rec, aux, cfg.auxiliary_loss_weight, cfg.p_norm)
        if not math.isfinite(breakdown.total):
            raise NumericalError(
                f"non-finite loss at step {step}; last checkpoint kept at {ckpt_path}"
            )
        opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.clipping_gradient)
        opt.step()
        sched.step()

        lr = opt.param_groups[0]["lr"]
        if initial_loss is None:
            initial_loss = breakdown.reconstruction
        final_loss = breakdown.reconstruction
        with open(curve_path, "a") as fh:
            fh.write(
                f"{step},{breakdown.reconstruction:.8g},{breakdown.auxiliary:.8g},{breakdown.total:.8g},{lr:.8g}\n"
            )
        record = {"step": step, "lr": lr, **breakdown.as_dict()}
        record["gates"] = _gate_telemetry(cfg, gates)
        telemetry.write(record)
        stopping = stop_after is not None and step + 1 >= stop_after
        if pos == steps_per_epoch - 1 or step == total_steps - 1 or stopping:
            save_train_checkpoint(ckpt_path, cfg, model, opt, params, step + 1)
        if stopping:
            break

    summary = {
        "steps": total_steps,
        "initial_reconstruction": initial_loss,
        "final_reconstruction": final_loss,
        "wall_seconds": time.time() - started,
        "checkpoint": str(ckpt_path),
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# features, probes, oracles


def pooled_vector(enc_outputs, partition: geometry.LobePartition | None) -> torch.Tensor:
    """IILP vector, or the unpooled per-channel variant when partition is None."""
    if partition is not None:
        return iilp.iilp_vector(enc_outputs, partition)
    per_layer = [iilp.temporal_pool(z).flatten(start_dim=-2) for z in enc_outputs]
    return torch.cat(per_layer, dim=-1)


def extract_features(
    model: EEGModel,
    samples: list[EEGSample],
    partition: geometry.LobePartition | None,
    batch_size: int = 32,
) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x = torch.as_tensor(
                dataset_values(samples[i : i + batch_size]), dtype=model.dtype
            )
            enc = model.features(x)
            feats.append(pooled_vector(enc, partition).numpy())
    return np.concatenate(feats)


def linear_probe_accuracy(
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    test_feats: np.ndarray,
    test_labels: np.ndarray,
    C: float = 0.5,
) -> float:
    """Balanced accuracy of a logistic-regression probe on frozen features."""
    scaler = StandardScaler().fit(train_feats)
    clf = LogisticRegression(max_iter=2000, C=C)
    clf.fit(scaler.transform(train_feats), train_labels)
    pred = clf.predict(scaler.transform(test_feats))
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    conf = metrics.confusion_matrix(pred, test_labels, n_classes)
    return metrics.balanced_accuracy(conf)


def linear_probe_cv(feats: np.ndarray, labels: np.ndarray, k: int = 5) -> float:
    """Cross-validated linear-probe balanced accuracy (stratified folds).

    Folding the probe instead of using one split removes most of the probe's
    own variance, leaving the feature quality under test.
    """
    labels = np.asarray(labels)
    folds = [[] for _ in range(k)]
    for cls in np.unique(labels):
        for j, idx in enumerate(np.nonzero(labels == cls)[0]):
            folds[j % k].append(idx)
    accs = []
    for fold in folds:
        test_idx = np.array(sorted(fold))
        train_idx = np.array(sorted(set(range(len(labels))) - set(fold)))
        accs.append(
            linear_probe_accuracy(
                feats[train_idx], labels[train_idx], feats[test_idx], labels[test_idx]
            )
        )
    return float(np.mean(accs))


def band_power_features(samples: list[EEGSample]) -> np.ndarray:
    """Log band power per channel and band: the independent task oracle."""
    feats = []
    for s in samples:
        freqs, psd = sp_signal.periodogram(s.values, fs=s.rate, axis=0)
        row = []
        for lo, hi in BANDS.values():
            sel = (freqs >= lo) & (freqs < hi)
            row.append(np.log(psd[sel].sum(axis=0) + 1e-12))
        feats.append(np.concatenate(row))
    return np.stack(feats)


def band_power_oracle_accuracy(train, test) -> float:
    return linear_probe_accuracy(
        band_power_features(train), dataset_labels(train),
        band_power_features(test), dataset_labels(test),
    )


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_logits(model, head, partition, x, rng=None, training=False):
    enc = model.encode(x, None, rng=rng, training=training)
    return head(pooled_vector(enc, partition))


def run_finetune(cfg: RunConfig, checkpoint: str | None = None, datasets=None) -> dict:
    """Attach the lobe-pooled classifier and optimize the prior-adjusted BCE.

    ``datasets`` may supply (train, val, test) sample lists directly;
    otherwise they come from cfg.dataset / synthesis.  Returns a summary with
    the test EvalResult.
    """
    out = prepare_run_dir(cfg, "finetune")
    layout, partition = resolve_layout(cfg)
    if cfg.pooling == "none":
        partition = None
    if datasets is None:
        datasets = tuple(load_or_synth(cfg, s, labeled=True) for s in ("train", "val", "test"))
    train, val, test = datasets
    labels = dataset_labels(train)
    n_classes = cfg.n_classes
    if labels.max() + 1 > n_classes:
        raise ConfigError(
            f"labels go up to {labels.max()} but finetune.n_classes={n_classes}"
        )

    dtype = torch_dtype(cfg)
    if checkpoint:
        model, _, _, _ = load_model_from_checkpoint(checkpoint, layout)
        model = model.to(dtype)
        cfg.model = model.config
    else:
        model = make_model(cfg, layout)
    mc = model.config
    feat_dim = (
        iilp.iilp_length(partition, mc.n_layers, mc.d_model)
        if partition is not None
        else len(layout) * mc.n_layers * mc.d_model
    )
    head = iilp.ClassifierHead(
        feat_dim, n_classes, hidden=[4 * mc.d_model] * cfg.class_layers,
        activation=mc.activation,
    ).to(dtype)
    init_parameters(head, seeded_stream(cfg.seed).split("head-init"))

    prior = ClassPrior.from_labels(labels, n_classes)
    use_balbce = cfg.finetune_loss == "balbce"
    params = list(model.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(
        params, lr=cfg.maximum_learning_rate, betas=cfg.adamw_betas, weight_decay=cfg.weight_decay
    )
    values = dataset_values(train)
    n = len(train)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    sched = _make_scheduler(cfg, opt, max(1, total_steps))
    root = seeded_stream(cfg.seed)
    curve_path = out / "loss_curve.csv"
    curve_path.write_text("step,loss,lr\n")
    history = []

    for epoch in range(cfg.epochs):
        frozen = epoch < cfg.freeze_epochs
        for p in model.parameters():
            p.requires_grad_(not frozen)
        order = root.split(f"order/epoch{epoch}").permutation(n)
        for pos in range(steps_per_epoch):
            step = epoch * steps_per_epoch + pos
            idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
            x = torch.as_tensor(values[idx], dtype=dtype)
            y = labels[idx]
            step_rng = root.split(f"step{step}")
            logits = finetune_logits(model, head, partition, x, rng=step_rng, training=True)
            if use_balbce:
                loss = balbce_loss(logits, y, prior)
            else:
                loss = torch.nn.functional.cross_entropy(
                    logits, torch.as_tensor(y, dtype=torch.int64)
                )
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite fine-tuning loss at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_([p for p in params if p.requires_grad], cfg.clipping_gradient)
            opt.step()
            sched.step()
            with open(curve_path, "a") as fh:
                fh.write(f"{step},{float(loss.detach()):.8g},{opt.param_groups[0]['lr']:.8g}\n")
        val_acc = (
            _balanced_accuracy_on(model, head, partition, val, n_classes) if val else None
        )
        history.append({"epoch": epoch, "val_balanced_accuracy": val_acc})

    scores = _scores_on(model, head, partition, test)
    result = metrics.evaluate(scores, dataset_labels(test))
    arrays = dict(state_arrays(model))
    arrays.update({f"head.{k}": v.detach().numpy() for k, v in head.state_dict().items()})
    save_checkpoint(
        out / CHECKPOINT_NAME,
        arrays,
        {
            "kind": "finetune",
            "seed": cfg.seed,
            "step": total_steps,
            "config": dump_config(cfg),
            "n_classes": n_classes,
            "dtype": str(dtype).replace("torch.", ""),
        },
    )
    summary = {"test": result.as_dict(), "history": history}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "metrics.csv").write_text(result.csv_header() + "\n" + result.csv_row() + "\n")
    return {"result": result, "history": history, "model": model, "head": head, "summary": summary}


def _scores_on(model, head, partition, samples, batch_size: int = 64) -> np.ndarray:
    scores = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x = torch.as_tensor(dataset_values(samples[i : i + batch_size]), dtype=model.dtype)
            scores.append(finetune_logits(model, head, partition, x).numpy())
    return np.concatenate(scores)


def _balanced_accuracy_on(model, head, partition, samples, n_classes) -> float:
    scores = _scores_on(model, head, partition, samples)
    pred = scores.argmax(axis=1)
    conf = metrics.confusion_matrix(pred, dataset_labels(samples), n_classes)
    return metrics.balanced_accuracy(conf)


def run_evaluate(cfg: RunConfig, checkpoint: str) -> metrics.EvalResult:
    """Score a fine-tuned checkpoint on the test split."""
    out = prepare_run_dir(cfg, "evaluate")
    arrays, meta = load_checkpoint(checkpoint)
    if meta.get("kind") != "finetune":
        raise ConfigError("evaluate needs a fine-tuned checkpoint")
    from .config import apply_pairs, parse_config_text

    ck_cfg = RunConfig()
    apply_pairs(ck_cfg, parse_config_text(meta["config"]))
    ck_cfg.dataset = cfg.dataset or ck_cfg.dataset
    layout, partition = resolve_layout(ck_cfg)
    if ck_cfg.pooling == "none":
        partition = None
    dtype = torch.float64 if meta.get("dtype") == "float64" else torch.float32
    model = EEGModel(ck_cfg.model, layout, dtype=dtype)
    load_state_arrays(model, {k: v for k, v in arrays.items() if not k.startswith(("opt.", "head."))})
    feat_dim = (
        iilp.iilp_length(partition, ck_cfg.model.n_layers, ck_cfg.model.d_model)
        if partition is not None
        else len(layout) * ck_cfg.model.n_layers * ck_cfg.model.d_model
    )
    head = iilp.ClassifierHead(
        feat_dim, int(meta["n_classes"]),
        hidden=[4 * ck_cfg.model.d_model] * ck_cfg.class_layers,
        activation=ck_cfg.model.activation,
    ).to(dtype)
    head.load_state_dict(
        {k[len("head."):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("head.")}
    )
    test = load_or_synth(ck_cfg, "test", labeled=True)
    result = metrics.evaluate(_scores_on(model, head, partition, test), dataset_labels(test))
    (out / "metrics.json").write_text(result.to_json())
    (out / "metrics.csv").write_text(result.csv_header() + "\n" + result.csv_row() + "\n")
    return result


# ---------------------------------------------------------------------------
# ablations


ABLATION_AXES = {
    "moe_schedule": ["w/o", "uniform", "shrinking", "progressive"],
    "pooling": ["none", "mean", "hemispheres", "coronal", "sagittal", "IILP"],
    "masking": ["random", "AAMP"],
    "positional_encoding": ["trigonometric", "learnable_1d", "learnable_2d", "3d"],
    "activation": ["relu", "gelu", "swiglu"],
}

_SCHEDULES = {
    "w/o": lambda L: [0] * L,
    "uniform": lambda L: [4] * L,
    "shrinking": lambda L: ([6, 4, 4, 4, 0, 0] * ((L + 5) // 6))[:L],
    "progressive": lambda L: ([0, 0, 2, 4, 4, 6] * ((L + 5) // 6))[:L],
}

_PE_MODES = {"trigonometric": "index", "learnable_1d": "learnable1d", "learnable_2d": "learnable2d", "3d": "3d"}


def _variant_cfg(cfg: RunConfig, **model_updates) -> RunConfig:
    new = dataclasses.replace(cfg)
    new.model = dataclasses.replace(cfg.model, **model_updates)
    return new


def run_ablation(cfg: RunConfig, axis: str) -> list[dict]:
    """Pretrain each variant and compare linear-probe balanced accuracy.

    Emits ``ablation_<axis>.csv`` in the run directory, one row per variant
    in the corresponding comparison table's order.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; axes: {sorted(ABLATION_AXES)}")
    out = prepare_run_dir(cfg, f"ablate-{axis}")
    layout, partition = resolve_layout(cfg)
    n_classes = max(2, cfg.synth_classes or 2)
    labeled = build_synth_samples(
        layout, max(cfg.synth_segments, 120), cfg.synth_seed + 1,
        n_classes=n_classes, data_length=cfg.data_length,
    )
    split = int(0.7 * len(labeled))
    probe_train, probe_test = labeled[:split], labeled[split:]

    def probe(model, part) -> float:
        return linear_probe_accuracy(
            extract_features(model, probe_train, part), dataset_labels(probe_train),
            extract_features(model, probe_test, part), dataset_labels(probe_test),
        )

    rows = []

    def pretrain_variant(variant_cfg: RunConfig, tag: str):
        variant_cfg.out_dir = str(Path(out) / f"variant_{tag}")
        summary = run_pretrain(variant_cfg)
        model, _, _, _ = load_model_from_checkpoint(summary["checkpoint"], layout)
        return model, summary

    if axis == "pooling":
        model, summary = pretrain_variant(dataclasses.replace(cfg), "shared")
        parts = {
            "none": None,
            "mean": geometry.mean_all_partition(layout),
            "hemispheres": geometry.hemisphere_partition(layout),
            "coronal": geometry.coronal_partition(layout),
            "sagittal": geometry.sagittal_partition(layout),
            "IILP": geometry.default_lobes(layout),
        }
        for name in ABLATION_AXES[axis]:
            rows.append(
                {
                    "variant": name,
                    "final_reconstruction": summary["final_reconstruction"],
                    "probe_balanced_accuracy": probe(model, parts[name]),
                }
            )
    else:
        for name in ABLATION_AXES[axis]:
            if axis == "moe_schedule":
                variant = _variant_cfg(cfg, expert_counts=_SCHEDULES[name](cfg.model.n_layers))
            elif axis == "masking":
                variant = dataclasses.replace(cfg, mask_strategy="aamp" if name == "AAMP" else "random")
            elif axis == "positional_encoding":
                variant = _variant_cfg(cfg, pe_mode=_PE_MODES[name])
            else:
                variant = _variant_cfg(cfg, activation=name)
            model, summary = pretrain_variant(variant, name.replace("/", "").replace(" ", "_"))
            rows.append(
                {
                    "variant": name,
                    "final_reconstruction": summary["final_reconstruction"],
                    "probe_balanced_accuracy": probe(model, partition),
                }
            )

    csv_path = Path(out) / f"ablation_{axis}.csv"
    with open(csv_path, "w") as fh:
        fh.write("variant,final_reconstruction,probe_balanced_accuracy\n")
        for row in rows:
            fh.write(
                f"{row['variant']},{row['final_reconstruction']:.6g},{row['probe_balanced_accuracy']:.4f}\n"
            )
    return rows


# ---------------------------------------------------------------------------
# gradient suite


def gradient_suite(seed: int = 0, rel_tol: float = 1e-4) -> list:
    """Finite-difference checks across every differentiable component."""
    from . import objectives
    from .model import TSALayer, merge_segments
    from .numerics import gradient_check, module_gradient_check
    from .pmoe import PMoELayer

    reports = []
    rng = seeded_stream(seed)

    small = ModelConfig(
        d_model=12,
        n_heads=2,
        n_layers=2,
        merge_factors=[1, 2],
        expert_counts=[0, 3],
        shared_ffn_width=16,
        expert_ffn_width=8,
        dropout=0.0,
        decoder_layers=1,
        activation="swiglu",
    )
    layout = geometry.builtin_layout("ten_twenty_19")
    sub = geometry.ElectrodeLayout(layout.channels[:3], "monopolar")
    model = EEGModel(small, sub, dtype=torch.float64)
    init_parameters(model, rng.split("model-init"))

    def randn(*shape):
        return torch.as_tensor(rng.normal(size=shape), dtype=torch.float64)

    x = randn(1, 4, 3)
    reports.append(
        module_gradient_check(model, [x], "embed_points", forward=lambda m, t: m.embed_points(t))
    )

    tsa = TSALayer(small, n_experts=0).to(torch.float64)
    init_parameters(tsa, rng.split("tsa-init"))
    reports.append(module_gradient_check(tsa, [randn(1, 4, 3, 12)], "tsa_layer", rel_tol=rel_tol))

    merge = torch.nn.Linear(24, 12, bias=False).to(torch.float64)
    init_parameters(merge, rng.split("merge-init"))
    reports.append(
        module_gradient_check(
            merge, [randn(1, 5, 2, 12)], "merge_segments",
            forward=lambda m, z: merge_segments(z, 2, m), rel_tol=rel_tol,
        )
    )

    moe = PMoELayer(12, 4, 8, 16, activation="swiglu", noise_std=0.0).to(torch.float64)
    init_parameters(moe, rng.split("moe-init"))
    reports.append(
        module_gradient_check(
            moe, [randn(7, 12)], "pmoe_layer", forward=lambda m, z: m(z)[0], rel_tol=rel_tol
        )
    )

    mask_spec = masking.aamp_mask(np.asarray(rng.normal(size=(4, 3))), 0.35, rng.split("mask"))
    layer_masks = masking.coarsen(mask_spec, small.merge_factors)

    def encode_decode(m, t):
        enc = m.encode(t, layer_masks)
        return m.decode_reconstruct(enc, t, layer_masks.masks[0])

    reports.append(
        module_gradient_check(model, [x], "encode_decode", forward=encode_decode, rel_tol=rel_tol)
    )

    partition = geometry.default_lobes(sub)
    head = iilp.ClassifierHead(
        iilp.iilp_length(partition, small.n_layers, small.d_model), 2, hidden=[8]
    ).to(torch.float64)
    init_parameters(head, rng.split("head-init"))
    enc_fixed = [randn(1, 4, 3, 12), randn(1, 2, 3, 12)]
    reports.append(
        module_gradient_check(
            head,
            enc_fixed,
            "iilp_classify",
            forward=lambda h, a, b: h(iilp.iilp_vector([a, b], partition)),
            rel_tol=rel_tol,
        )
    )

    xr = randn(2, 4, 3)
    xh = randn(2, 4, 3)
    reports.append(
        gradient_check(lambda a, b: objectives.recon_loss(a, b, 2.0), [xr, xh], op_name="recon_loss")
    )

    logits = randn(5, 3)
    prior = ClassPrior(np.array([2, 2, 1]))
    labels = np.array([0, 1, 2, 0, 1])
    reports.append(
        gradient_check(
            lambda z: objectives.balbce_loss(z, labels, prior),
            [logits],
            op_name="balbce_loss",
            rel_tol=1e-6,
        )
    )
    return reports
