"""SGD training loops: single-size baseline, epoch-alternating multi-size
training on one shared parameter store, the uniform-random size variant, and
fc-only fine-tuning on pooled region features.

Learning rate starts at the configured value and is divided by 10 (at most
twice) when eval accuracy plateaus: improvement below 0.2 points over 3
consecutive epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataio, tensor
from .errors import GraphError, TrainingDivergedError
from .geometry import resize_image
from .net import FC, Dropout, NetworkSpec, ParameterStore, ReLU, Softmax, instantiate


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    schedule: str = "single"          # single | alternate | random
    sizes: tuple[int, ...] = (224,)   # alternate: (s1, s2); random: (lo, hi)
    eval_size: int | None = None      # None -> sizes[0]
    seed: int = 0
    flip_augment: bool = True
    input_mean: float = dataio.DEFAULT_MEAN
    input_scale: float = 1.0 / 128.0
    lr_decay_factor: float = 0.1
    plateau_patience: int = 3
    plateau_min_improve: float = 0.002  # 0.2 accuracy points
    max_decays: int = 2

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.schedule not in ("single", "alternate", "random"):
            raise ValueError(f"unknown size schedule {self.schedule!r}")
        self.sizes = tuple(int(s) for s in self.sizes)


@dataclass
class EpochReport:
    epoch: int
    size: int
    loss: float
    accuracy: float

    def line(self) -> str:
        return f"{self.epoch},{self.size},{self.loss:.6f},{self.accuracy:.6f}"


def multi_size_schedule(config: TrainConfig):
    """Per-epoch input sizes: constant, two-size alternation, or one uniform
    draw from [lo, hi] per epoch (seeded)."""
    if config.schedule == "single":
        for _ in range(config.epochs):
            yield config.sizes[0]
    elif config.schedule == "alternate":
        for e in range(config.epochs):
            yield config.sizes[e % len(config.sizes)]
    else:
        lo, hi = min(config.sizes), max(config.sizes)
        rng = np.random.default_rng(config.seed)
        for _ in range(config.epochs):
            yield int(rng.integers(lo, hi + 1))


def sgd_step(params: ParameterStore, lr: float, momentum: float):
    """Classic momentum update; clears gradients. Aborts on non-finite grads."""
    for name, slot in params.items():
        if not np.isfinite(slot.grad).all():
            raise TrainingDivergedError(
                f"non-finite gradient in slot {name!r}; aborting")
        slot.momentum *= momentum
        slot.momentum -= lr * slot.grad
        slot.value += slot.momentum
        slot.grad[...] = 0.0


def resize_square(pixels: np.ndarray, s: int) -> np.ndarray:
    """Resize so the min side is s, then center-crop to s x s."""
    out = resize_image(pixels, s)
    _, h, w = out.shape
    y0 = (h - s) // 2
    x0 = (w - s) // 2
    return out[:, y0:y0 + s, x0:x0 + s]


def _make_batch(dataset, indices, size, config, rng):
    xs = np.empty((len(indices), dataset[0][0].shape[0], size, size),
                  dtype=np.float32)
    ys = np.empty(len(indices), dtype=np.int64)
    for row, i in enumerate(indices):
        pixels, label = dataset[i]
        img = resize_square(pixels, size)
        if config.flip_augment and rng is not None and rng.random() < 0.5:
            img = img[:, :, ::-1]
        xs[row] = dataio.preprocess(img, config.input_mean, config.input_scale)
        ys[row] = label
    return xs, ys


def evaluate(spec: NetworkSpec, params: ParameterStore, dataset, size: int,
             config: TrainConfig) -> float:
    """Top-1 accuracy at a square center view of the given size."""
    if not dataset:
        return float("nan")
    instance = instantiate(spec, (size, size), params)
    correct = 0
    bs = config.batch_size
    for start in range(0, len(dataset), bs):
        idx = range(start, min(start + bs, len(dataset)))
        xs, ys = _make_batch(dataset, idx, size, config, rng=None)
        logits, _ = instance.forward(xs, train_mode=False)
        correct += int((logits.argmax(axis=1) == ys).sum())
    return correct / len(dataset)


class _PlateauDecay:
    """Divide lr by the decay factor when best accuracy stalls; fires at most
    `max_decays` times."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.lr
        self.best = -np.inf
        self.stale = 0
        self.decays = 0

    def update(self, metric: float) -> float:
        if metric >= self.best + self.config.plateau_min_improve:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if (self.stale >= self.config.plateau_patience
                    and self.decays < self.config.max_decays):
                self.lr *= self.config.lr_decay_factor
                self.decays += 1
                self.stale = 0
        return self.lr


def train(spec: NetworkSpec, dataset, config: TrainConfig, eval_set=None,
          params: ParameterStore | None = None, on_epoch_end=None):
    """Run the configured schedule over `dataset` ((c,h,w) float32, label)
    pairs; returns (ParameterStore, [EpochReport]).

    Every epoch instantiates the network at that epoch's size against the
    same store, so all sizes train the same parameters. Plateau detection uses
    eval accuracy when an eval set is given, otherwise the (negated) training
    loss.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if params is None:
        params = ParameterStore(seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    decay = _PlateauDecay(config)
    eval_size = config.eval_size or config.sizes[0]
    reports = []
    for epoch, size in enumerate(multi_size_schedule(config)):
        instance = instantiate(spec, (size, size), params)
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xs, ys = _make_batch(dataset, idx, size, config, rng)
            logits, saved = instance.forward(xs, train_mode=True, rng=rng)
            loss, grad = tensor.softmax_cross_entropy(logits, ys)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}")
            instance.backward(saved, grad)
            sgd_step(params, decay.lr, config.momentum)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        acc = evaluate(spec, params, eval_set, eval_size, config) \
            if eval_set else float("nan")
        reports.append(EpochReport(epoch, size, mean_loss, acc))
        decay.update(acc if eval_set else -mean_loss)
        if on_epoch_end is not None:
            on_epoch_end(reports[-1], params)
    return params, reports


# ---------------------------------------------------------------------------
# fc-only fine-tuning on pooled region features
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    n_classes: int                     # detection classes + background
    steps: int = 400
    batch_size: int = 32
    positive_fraction: float = 0.25    # positives per mini-batch
    lr_initial: float = 1e-4
    lr_late: float = 1e-5
    late_fraction: float = 0.2         # tail of steps run at lr_late
    momentum: float = 0.9
    sigma: float = 0.01                # init of the new output layer
    head_name: str = "fc_det"
    seed: int = 0


class FcHead:
    """The fc stack after the pyramid layer, with the final classifier layer
    replaced by a freshly initialized one: label 0 is background.

    Operates on already-pooled fixed-length features, touching only fc slots.
    """

    def __init__(self, spec: NetworkSpec, params: ParameterStore,
                 config: FinetuneConfig):
        self.params = params
        self.config = config
        self.layers = []
        head = [l for l in spec.head_layers() if not isinstance(l, Softmax)]
        fc_layers = [l for l in head if isinstance(l, FC)]
        if not fc_layers:
            raise GraphError("network head has no fc layer to fine-tune")
        last_fc = fc_layers[-1]
        in_features = None
        for layer in head:
            if layer is last_fc:
                break
            if isinstance(layer, FC):
                wname = f"{layer.name}.weight"
                if wname not in params:
                    raise GraphError(
                        f"slot {wname} missing; fine-tune after pre-training")
                in_features = params[wname].value.shape[0]
                self.layers.append(("fc", layer.name))
            elif isinstance(layer, ReLU):
                self.layers.append(("relu", layer.name))
            elif isinstance(layer, Dropout):
                self.layers.append(("drop", layer.name, layer.rate))
        if in_features is None:
            # single-fc head: the new layer reads the pooled features directly
            wname = f"{last_fc.name}.weight"
            if wname not in params:
                raise GraphError(
                    f"slot {wname} missing; fine-tune after pre-training")
            in_features = params[wname].value.shape[1]
        params.reinit_slot(f"{config.head_name}.weight",
                           (config.n_classes, in_features), config.sigma)
        params.reinit_slot(f"{config.head_name}.bias", (config.n_classes,),
                           init="zeros")
        self.layers.append(("fc", config.head_name))
        self.fc_slot_names = [f"{name}.{suffix}"
                              for kind, name, *rest in self.layers
                              if kind == "fc" for suffix in ("weight", "bias")]

    def forward(self, x: np.ndarray, train_mode: bool,
                rng: np.random.Generator | None):
        caches = []
        for entry in self.layers:
            kind, name = entry[0], entry[1]
            if kind == "fc":
                w = self.params[f"{name}.weight"].value
                b = self.params[f"{name}.bias"].value
                caches.append(("fc", name, x))
                x = tensor.fc_forward(x, w, b)
            elif kind == "relu":
                x, mask = tensor.relu_forward(x)
                caches.append(("relu", name, mask))
            else:
                x, mask = tensor.dropout(x, entry[2], train_mode, rng)
                caches.append(("drop", name, mask))
        return x, caches

    def backward(self, caches, grad):
        for cache in reversed(caches):
            kind, name = cache[0], cache[1]
            if kind == "fc":
                wslot = self.params[f"{name}.weight"]
                bslot = self.params[f"{name}.bias"]
                grad, gw, gb = tensor.fc_backward(grad, cache[2], wslot.value)
                wslot.grad += gw
                bslot.grad += gb
            elif kind == "relu":
                grad = tensor.relu_backward(grad, cache[2])
            else:
                grad = tensor.dropout_backward(grad, cache[2])
        return grad

    def scores(self, features: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(features, train_mode=False, rng=None)
        return logits

    def _sgd_fc_only(self, lr):
        for name in self.fc_slot_names:
            slot = self.params[name]
            if not np.isfinite(slot.grad).all():
                raise TrainingDivergedError(f"non-finite gradient in {name!r}")
            slot.momentum *= self.config.momentum
            slot.momentum -= lr * slot.grad
            slot.value += slot.momentum
            slot.grad[...] = 0.0


def finetune_fc(params: ParameterStore, spec: NetworkSpec,
                features: np.ndarray, labels: np.ndarray,
                config: FinetuneConfig, on_batch=None):
    """Fine-tune the fc layers on fixed-length pooled region features.

    Labels: 0 = background, 1..n-1 = object classes. Each mini-batch holds
    `positive_fraction` positives (label > 0). Conv slots are untouched and
    verified bit-identical before/after. Returns the trained FcHead.
    """
    labels = np.asarray(labels)
    pos_idx = np.flatnonzero(labels > 0)
    neg_idx = np.flatnonzero(labels == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise ValueError("need at least one positive and one negative sample")

    conv_before = {name: slot.value.copy() for name, slot in params.items()
                   if name.startswith("conv")}
    head = FcHead(spec, params, config)
    frozen = set(params.names()) - set(head.fc_slot_names)
    rng = np.random.default_rng(config.seed)
    n_pos = max(1, int(round(config.batch_size * config.positive_fraction)))
    switch = int(config.steps * (1.0 - config.late_fraction))
    for step in range(config.steps):
        lr = config.lr_initial if step < switch else config.lr_late
        pick_pos = rng.choice(pos_idx, size=n_pos, replace=True)
        pick_neg = rng.choice(neg_idx, size=config.batch_size - n_pos,
                              replace=True)
        idx = np.concatenate([pick_pos, pick_neg])
        rng.shuffle(idx)
        xb = features[idx].astype(np.float32)
        yb = labels[idx]
        logits, caches = head.forward(xb, True, rng)
        loss, grad = tensor.softmax_cross_entropy(logits, yb)
        head.backward(caches, grad)
        for name in frozen:
            if params[name].grad.any():
                raise GraphError(
                    f"fine-tuning attempted to update frozen slot {name!r}")
        head._sgd_fc_only(lr)
        if on_batch is not None:
            on_batch(step, yb, loss)
    for name, before in conv_before.items():
        if not np.array_equal(params[name].value, before):
            raise GraphError(f"conv slot {name!r} changed during fine-tuning")
    return head
