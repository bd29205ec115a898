"""Training loop with evolving sparse masks, checkpoints and metrics.

One iteration is: forward, loss, backward, optimizer step on the dense
gradient, then ``W := M * W``. Every ``t_iter`` iterations (up to
``t_end``) each sparse layer is rewired. The model with the best
validation accuracy is kept.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import container
from .config import ConfigError, TrainingConfig
from .container import NamedMask
from .datasets import (
    EventDataset,
    ImageDataset,
    encode_rate,
    encode_temporal,
    load_mnist,
    synthetic_events,
    train_val_split,
)
from .lif import LifConfig, build_lif_mlp, build_tiny_conv
from .temporal import TemporalMLP, clip_norm
from .topology import GrowthSignals, RewireEvent, SparseMask, rewire_step

CHECKPOINT_VERSION = 1
METRICS_HEADER = [
    "iteration", "epoch", "train_loss", "val_accuracy", "layer_densities", "rewires_cum", "seconds",
]


class TrainingError(RuntimeError):
    pass


# --- data ---------------------------------------------------------------------


@dataclass
class DataBundle:
    train: ImageDataset | EventDataset
    test: ImageDataset | EventDataset
    n_classes: int

    @property
    def is_events(self):
        return isinstance(self.train, EventDataset)


def _synthetic_pool(cfg: TrainingConfig):
    if cfg.data_file:
        sec = container.load(cfg.data_file)
        pool = EventDataset(sec["samples"], sec["labels"].astype(np.int64))
        n_test = int(sec["meta"].get("n_test", round(0.2 * len(pool))))
        n_classes = int(sec["meta"].get("n_classes", pool.labels.max() + 1))
    else:
        per = cfg.syn_per_class + cfg.syn_test_per_class
        pool = synthetic_events(per, cfg.syn_classes, cfg.syn_timesteps, cfg.syn_height,
                                cfg.syn_width, seed=cfg.syn_seed, noise=cfg.syn_noise)
        n_test = cfg.syn_classes * cfg.syn_test_per_class
        n_classes = cfg.syn_classes
    n = len(pool)
    if not 0 < n_test < n:
        raise ConfigError(f"synthetic pool of {n} samples cannot hold {n_test} test samples")
    return (pool.subset(np.arange(n - n_test)), pool.subset(np.arange(n - n_test, n)),
            n_classes)


def load_data(cfg: TrainingConfig) -> DataBundle:
    if cfg.dataset == "mnist":
        root = cfg.data_dir or None
        train, test, n_classes = load_mnist("train", root), load_mnist("test", root), 10
    else:
        train, test, n_classes = _synthetic_pool(cfg)
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    if cfg.test_limit:
        test = test.subset(np.arange(min(cfg.test_limit, len(test))))
    bundle = DataBundle(train, test, n_classes)
    if cfg.preset == "temporal_mlp" and bundle.is_events:
        raise ConfigError("dataset/config mismatch: temporal_mlp needs image data")
    return bundle


def input_shape(cfg: TrainingConfig, data: DataBundle) -> tuple:
    if data.is_events:
        return tuple(int(s) for s in data.train.samples.shape[2:])  # C, H, W
    return (1,) + tuple(int(s) for s in data.train.images.shape[1:])


def encode_batch(cfg: TrainingConfig, data_split, idx, seed=0):
    """Model input for the samples ``idx`` of a split."""
    if isinstance(data_split, EventDataset):
        x = np.moveaxis(data_split.samples[idx].astype(np.float64), 1, 0)  # T, B, C, H, W
    elif cfg.preset == "temporal_mlp":
        t_late = cfg.t_late if cfg.t_late >= 0 else None
        return encode_temporal(data_split.images[idx], cfg.threshold, t_late)
    else:
        x = encode_rate(data_split.images[idx], cfg.timesteps, cfg.encoding, seed)
    if cfg.preset == "lif_mlp":
        x = x.reshape(x.shape[0], x.shape[1], -1)
    return x.astype(cfg.dtype, copy=False)


# --- model --------------------------------------------------------------------


def _eps_list(cfg: TrainingConfig, n_layers: int):
    eps = list(cfg.epsilon[:n_layers])
    return eps + [None] * (n_layers - len(eps))


def build_model(cfg: TrainingConfig, in_shape: tuple, n_classes: int):
    n_in = int(np.prod(in_shape))
    if cfg.preset == "temporal_mlp":
        return TemporalMLP.build([n_in, cfg.hidden, n_classes], _eps_list(cfg, 2), cfg.seed,
                                 weight_reg=cfg.weight_reg, init_scale=cfg.init_scale)
    lif_cfg = LifConfig(cfg.tau, cfg.v_th, cfg.surrogate_width)
    dtype = np.dtype(cfg.dtype)
    if cfg.preset == "lif_mlp":
        return build_lif_mlp((n_in, cfg.hidden, n_classes), _eps_list(cfg, 2), cfg.seed,
                             lif_cfg, dtype, cfg.init_gain)
    return build_tiny_conv(tuple(in_shape), n_classes, epsilons=_eps_list(cfg, 3),
                           seed=cfg.seed, cfg=lif_cfg, dtype=dtype, gain=cfg.init_gain)


def _eval_batch(cfg):
    return 100 if cfg.preset == "tiny_conv" else 1000


def predict(model, cfg: TrainingConfig, data_split, seed=0) -> np.ndarray:
    n = len(data_split)
    step = _eval_batch(cfg)
    out = np.empty(n, dtype=np.int64)
    for s in range(0, n, step):
        idx = np.arange(s, min(n, s + step))
        out[idx] = model.predict(encode_batch(cfg, data_split, idx, seed=seed + s))
    return out


def accuracy(model, cfg, data_split, seed=0) -> float:
    if len(data_split) == 0:
        return float("nan")
    return float(np.mean(predict(model, cfg, data_split, seed) == data_split.labels))


# --- optimizer ----------------------------------------------------------------


class Optimizer:
    """Adam or SGD with momentum over a list of weight arrays."""

    def __init__(self, cfg: TrainingConfig, shapes):
        self.kind = cfg.optimizer
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.mu = cfg.momentum
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes] if self.kind == "adam" else []

    def step(self, weights, grads, lr):
        self.t += 1
        for k, (w, g) in enumerate(zip(weights, grads)):
            if self.kind == "adam":
                self.m[k] *= self.beta1
                self.m[k] += (1.0 - self.beta1) * g
                self.v[k] *= self.beta2
                self.v[k] += (1.0 - self.beta2) * g * g
                mh = self.m[k] / (1.0 - self.beta1 ** self.t)
                vh = self.v[k] / (1.0 - self.beta2 ** self.t)
                upd = lr * mh / (np.sqrt(vh) + self.eps)
            else:
                self.m[k] *= self.mu
                self.m[k] += g
                upd = lr * self.m[k]
            w -= upd.astype(w.dtype, copy=False)

    def momentum(self, k):
        return self.m[k]

    def copy_state(self):
        return {"kind": self.kind, "t": self.t,
                "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, st):
        self.t = int(st["t"])
        self.m = [np.array(a, dtype=np.float64) for a in st["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in st["v"]]


# --- records and checkpoints ------------------------------------------------------


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    train_loss: float
    val_accuracy: float
    layer_densities: list
    rewires_cum: int
    seconds: float

    def row(self):
        return [
            str(self.iteration),
            str(self.epoch),
            f"{self.train_loss:.10g}",
            "" if math.isnan(self.val_accuracy) else f"{self.val_accuracy:.10g}",
            ";".join(f"{d:.10g}" for d in self.layer_densities),
            str(self.rewires_cum),
            f"{self.seconds:.3f}",
        ]


def metrics_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


class MetricsWriter:
    """Appends records to a CSV file as they arrive."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.write_text(",".join(METRICS_HEADER) + "\n", encoding="utf-8")

    def __call__(self, record: MetricsRecord):
        with self.path.open("a", encoding="utf-8", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(record.row())


@dataclass
class LayerState:
    name: str
    kind: str
    weights: np.ndarray
    mask: SparseMask
    ever_active: SparseMask
    out_positions: int = 1


@dataclass
class Checkpoint:
    config: TrainingConfig
    epoch: int
    iteration: int
    best_val_accuracy: float
    input_shape: tuple
    n_classes: int
    layers: list[LayerState]
    optimizer: dict
    rng_state: dict
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "best_val_accuracy": self.best_val_accuracy,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [{"name": l.name, "kind": l.kind, "out_positions": l.out_positions}
                       for l in self.layers],
            "optimizer": {"kind": self.optimizer["kind"], "t": self.optimizer["t"]},
            "rng_state": self.rng_state,
            "extra": self.extra,
        }
        sections = [("meta", meta)]
        for k, l in enumerate(self.layers):
            sections.append((f"weights/{l.name}", np.asarray(l.weights)))
            sections.append((f"mask/{l.name}", NamedMask(l.name, l.mask)))
            sections.append((f"ever_active/{l.name}", NamedMask(l.name, l.ever_active)))
            sections.append((f"opt_m/{l.name}", self.optimizer["m"][k]))
            if self.optimizer["v"]:
                sections.append((f"opt_v/{l.name}", self.optimizer["v"][k]))
        return container.dumps(sections)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        sec = container.loads(buf)
        try:
            meta = sec["meta"]
            if meta.get("version") != CHECKPOINT_VERSION:
                raise container.ContainerError(f"unsupported checkpoint version {meta.get('version')}")
            cfg = TrainingConfig.from_dict(meta["config"])
            if cfg.digest() != meta["config_hash"]:
                raise container.ContainerError("config hash mismatch")
            layers, ms, vs = [], [], []
            for info in meta["layers"]:
                name = info["name"]
                layers.append(LayerState(name, info["kind"], sec[f"weights/{name}"],
                                         sec[f"mask/{name}"].mask,
                                         sec[f"ever_active/{name}"].mask,
                                         int(info["out_positions"])))
                ms.append(sec[f"opt_m/{name}"])
                if f"opt_v/{name}" in sec:
                    vs.append(sec[f"opt_v/{name}"])
        except (KeyError, TypeError, ConfigError, AttributeError) as exc:
            raise container.ContainerError(f"corrupt checkpoint: {exc!r}") from exc
        opt = {"kind": meta["optimizer"]["kind"], "t": meta["optimizer"]["t"], "m": ms, "v": vs}
        return cls(cfg, meta["epoch"], meta["iteration"], meta["best_val_accuracy"],
                   tuple(meta["input_shape"]), meta["n_classes"], layers, opt,
                   meta["rng_state"], meta.get("extra", {}))

    def save(self, path) -> bytes:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return data

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self):
        model = build_model(self.config, self.input_shape, self.n_classes)
        for layer, st in zip(model.layers, self.layers):
            if layer.name != st.name or layer.weights.shape != st.weights.shape:
                raise container.ContainerError(f"checkpoint layer {st.name} does not fit the preset")
            layer.mask = st.mask.copy()
            layer.weights = np.ascontiguousarray(st.weights, dtype=layer.weights.dtype).copy()
        return model


def _layer_kind(layer):
    return "conv" if hasattr(layer, "kernel") else "dense"


def _out_positions(layer):
    return int(layer.output_positions()) if hasattr(layer, "output_positions") else 1


def _snapshot(cfg, model, ever, opt, epoch, iteration, best, in_shape, n_classes, rng):
    layers = [
        LayerState(l.name, _layer_kind(l), l.weights.copy(), l.mask.copy(), ever[k].copy(),
                   _out_positions(l))
        for k, l in enumerate(model.layers)
    ]
    return Checkpoint(cfg, epoch, iteration, best, tuple(in_shape), n_classes, layers,
                      opt.copy_state(), rng.bit_generator.state)


# --- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[MetricsRecord]
    events: list[RewireEvent]
    test_accuracy: float
    model: object = None


def _derive_seed(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1)[0])


def train(cfg: TrainingConfig, data: DataBundle | None = None,
          on_record: Callable | None = None, out_dir=None) -> TrainResult:
    """Run one training job.

    ``on_record(record, model)`` is called for every metrics record. With
    ``out_dir`` the metrics CSV and the best checkpoint are written there.
    """
    cfg.validate()
    data = data if data is not None else load_data(cfg)
    in_shape = input_shape(cfg, data)
    model = build_model(cfg, in_shape, data.n_classes)
    layers = model.layers
    sparse = list(model.sparse)

    tr_idx, va_idx = train_val_split(len(data.train), cfg.validation_fraction, cfg.seed)
    train_set, val_set = data.train.subset(tr_idx), data.train.subset(va_idx)
    n_train = len(train_set)
    iters_per_epoch = math.ceil(n_train / cfg.batch_size)
    schedule = cfg.schedule(iters_per_epoch)

    opt = Optimizer(cfg, [l.weights.shape for l in layers])
    ever = [l.mask.copy() for l in layers]
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(out_dir / "metrics.csv")

    records, events = [], []
    rewires_cum = 0
    t0 = time.perf_counter()
    iteration = 0
    best_val, best_ckpt = -1.0, None
    pending = []

    def emit(epoch, val_acc):
        loss = float(np.mean(pending)) if pending else float("nan")
        pending.clear()
        dens = [l.mask.density for l in layers]
        secs = time.perf_counter() - t0 if cfg.log_wallclock else 0.0
        rec = MetricsRecord(iteration, epoch, loss, val_acc, dens, rewires_cum, secs)
        records.append(rec)
        if writer:
            writer(rec)
        if on_record:
            on_record(rec, model)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = shuffle_rng.permutation(n_train)
        for b in range(iters_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            iteration += 1
            x = encode_batch(cfg, train_set, idx, seed=_derive_seed(cfg.seed, 3, iteration))
            loss, grads, _ = model.loss_and_grads(x, train_set.labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at iteration {iteration} (epoch {epoch}, lr {lr:g}); "
                    f"weight norms {[round(float(np.linalg.norm(l.weights)), 4) for l in layers]}"
                )
            pending.append(loss)
            grads = [clip_norm(g, cfg.clip_norm) for g in grads]
            step_grads = grads
            if not cfg.mask_every_step:
                # alternative reading: the mask only bites at rewire instants
                step_grads = [g * l.mask.bits for g, l in zip(grads, layers)]
            opt.step([l.weights for l in layers], step_grads, lr)
            if cfg.mask_every_step:
                for l in layers:
                    l.weights[~l.mask.bits] = 0.0
            if schedule.is_rewire_iteration(iteration):
                for k, l in enumerate(layers):
                    if not sparse[k]:
                        continue
                    aux = GrowthSignals(gradient=grads[k], momentum=opt.momentum(k),
                                        ever_active=ever[k].bits)
                    ev = rewire_step(l.mask, l.weights, schedule, iteration, aux,
                                     seed=_derive_seed(cfg.seed, 2, iteration, k), layer_id=l.name)
                    events.append(ev)
                    rewires_cum += ev.n_grown
            last = b == iters_per_epoch - 1
            if last:
                val_acc = accuracy(model, cfg, val_set, seed=cfg.seed)
                emit(epoch, val_acc)
                if val_acc > best_val:
                    best_val = val_acc
                    best_ckpt = _snapshot(cfg, model, ever, opt, epoch, iteration, best_val,
                                          in_shape, data.n_classes, shuffle_rng)
            elif iteration % cfg.log_every == 0:
                emit(epoch, float("nan"))

    best_model = best_ckpt.build_model()
    test_acc = accuracy(best_model, cfg, data.test, seed=cfg.seed + 1)
    best_ckpt.extra = {"test_accuracy": test_acc}
    if out_dir is not None:
        best_ckpt.save(out_dir / "checkpoint.esl")
    return TrainResult(best_ckpt, records, events, test_acc, best_model)


# --- evaluation and sweeps ---------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    n: int
    ops: object


def evaluate(checkpoint: Checkpoint, split: str = "test", data: DataBundle | None = None
             ) -> EvalResult:
    from .energy import count_ops

    cfg = checkpoint.config
    data = data if data is not None else load_data(cfg)
    if split == "test":
        ds = data.test
    elif split in ("train", "val"):
        tr, va = train_val_split(len(data.train), cfg.validation_fraction, cfg.seed)
        ds = data.train.subset(tr if split == "train" else va)
    else:
        raise ValueError(f"unknown split {split!r}")
    model = checkpoint.build_model()
    seed = cfg.seed + 1 if split == "test" else cfg.seed
    pred = predict(model, cfg, ds, seed)
    hits = pred == ds.labels
    per_class = np.array([
        hits[ds.labels == c].mean() if np.any(ds.labels == c) else np.nan
        for c in range(checkpoint.n_classes)
    ])
    return EvalResult(float(hits.mean()), per_class, len(ds), count_ops(checkpoint))


@dataclass
class SweepRow:
    epsilon: float
    seed: int
    density: float
    test_acc: float


def sparse_density(checkpoint: Checkpoint) -> float:
    """Active fraction over the sparse layers, counted from the masks."""
    sp = [l for l, e in zip(checkpoint.layers, _eps_list(checkpoint.config, len(checkpoint.layers)))
          if e is not None]
    sp = sp or checkpoint.layers
    return sum(l.mask.cardinality for l in sp) / sum(l.mask.size for l in sp)


def with_epsilon(cfg: TrainingConfig, eps: float) -> TrainingConfig:
    """Set every sparse layer's factor to ``eps`` (the first layer if none is sparse)."""
    cur = list(cfg.epsilon) or [None]
    if all(e is None for e in cur):
        cur[0] = eps
    else:
        cur = [None if e is None else eps for e in cur]
    return cfg.replace(epsilon=tuple(cur))


def sweep_epsilon(cfg: TrainingConfig, epsilons, seeds=(0,), data: DataBundle | None = None,
                  out_dir=None, on_row: Callable | None = None) -> list[SweepRow]:
    if any(not e > 0 for e in epsilons):
        raise ConfigError("epsilon values must be positive")
    data = data if data is not None else load_data(cfg)
    rows = []
    for eps in epsilons:
        for seed in seeds:
            run_cfg = with_epsilon(cfg, float(eps)).replace(seed=int(seed))
            run_dir = None if out_dir is None else Path(out_dir) / f"eps{eps:g}_seed{seed}"
            res = train(run_cfg, data, out_dir=run_dir)
            row = SweepRow(float(eps), int(seed), sparse_density(res.checkpoint), res.test_accuracy)
            rows.append(row)
            if on_row:
                on_row(row)
    return rows
