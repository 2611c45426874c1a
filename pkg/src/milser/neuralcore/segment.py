"""Segment-level CNN trained on inherited (SIL) labels.

The convolutional body is configurable; the tail is always
dense 256 -> ReLU -> dense 64 -> ReLU -> dense K, and the 64-wide ReLU output
is the segment embedding handed to the bag aggregators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateData, ShapeMismatch
from .layers import Conv2D, Dense, Flatten, ReLU, build_layer, softmax, softmax_cross_entropy
from .optim import TrainConfig
from .training import TrainLog, fit, group_split

DEFAULT_BODY = ("conv3x3:16", "relu", "maxpool2x2", "conv3x3:32", "relu", "maxpool2x2")
TAIL_WIDTHS = (256, 64)
EMBED_DIM = 64


class SegmentModel:
    def __init__(self, n_classes, input_shape=(32, 64), body=DEFAULT_BODY, seed=0, dtype=np.float32,
                 zero_head=False):
        self.n_classes = int(n_classes)
        self.input_shape = tuple(input_shape)
        self.body = tuple(body)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)

        shape = (1, *self.input_shape, 1)
        layers = []
        for token in self.body:
            layer = build_layer(token, shape, rng, dtype)
            shape = layer.output_shape(shape)
            layers.append(layer)
        layers.append(Flatten())
        shape = layers[-1].output_shape(shape)
        width = shape[-1]
        for w in TAIL_WIDTHS:
            layers += [Dense(width, w, rng=rng, dtype=dtype), ReLU()]
            width = w
        layers.append(Dense(width, self.n_classes, rng=None if zero_head else rng, dtype=dtype))
        self.layers = layers
        self.embed_index = len(layers) - 2  # ReLU after the 64-wide dense
        self.dtype = np.dtype(dtype)

    @property
    def params(self) -> dict:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def grads(self) -> dict:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"segment batch must be (B, {self.input_shape}), got {x.shape}")
        return x[..., None]

    def forward(self, x, train=False):
        """Return (logits (B, K), embeddings (B, 64))."""
        h = self._prepare(x)
        emb = None
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, train)
            if i == self.embed_index:
                emb = h
        return h, emb

    def backward(self, dlogits, input_grad=False):
        """Backpropagate; stops below the lowest parameterised layer unless ``input_grad``."""
        lowest = 0 if input_grad else next(i for i, l in enumerate(self.layers) if l.params)
        g = dlogits
        for i in range(len(self.layers) - 1, lowest - 1, -1):
            layer = self.layers[i]
            if i == lowest and not input_grad and isinstance(layer, Conv2D):
                layer.backward(g, need_input_grad=False)
                return None
            g = layer.backward(g)
        return g

    def loss(self, batch) -> float:
        x, y = batch[0], batch[1]
        logits, _ = self.forward(x)
        return softmax_cross_entropy(logits, y)[0]

    def loss_and_grads(self, batch):
        x, y = batch[0], batch[1]
        logits, _ = self.forward(x, train=True)
        loss, d = softmax_cross_entropy(logits, y)
        self.backward(d)
        return loss, self.grads()

    def predict_proba(self, x, batch_size=1024):
        return self.embed(x, batch_size)[1]

    def embed(self, x, batch_size=1024):
        """Embeddings (N, 64) and class probabilities (N, K) for a segment array."""
        embs, probs = [], []
        for start in range(0, len(x), batch_size):
            logits, emb = self.forward(x[start:start + batch_size])
            embs.append(emb)
            probs.append(softmax(logits.astype(np.float64)))
        if not embs:
            return np.zeros((0, EMBED_DIM), self.dtype), np.zeros((0, self.n_classes))
        return np.concatenate(embs), np.concatenate(probs)

    def architecture(self) -> dict:
        return {"n_classes": self.n_classes, "input_shape": list(self.input_shape), "body": list(self.body)}


def backward(model: SegmentModel, batch, labels):
    """Mean cross-entropy and parameter gradients for one batch."""
    return model.loss_and_grads((batch, np.asarray(labels)))


def forward(model: SegmentModel, batch):
    return model.forward(batch)


@dataclass
class SegmentDataset:
    """Flat segment table: features (N, 32, 64), SIL labels, owning utterance, start frame."""

    X: np.ndarray
    y: np.ndarray
    utterance: np.ndarray
    start: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return SegmentDataset(self.X[idx], self.y[idx], self.utterance[idx], self.start[idx])


def train_segment_model(data: SegmentDataset, n_classes: int, cfg: TrainConfig,
                        body=DEFAULT_BODY) -> tuple[SegmentModel, TrainLog]:
    """Fit the segment CNN; validation holds out ``cfg.val_fraction`` of utterances."""
    present = np.unique(data.y)
    if present.size < 2 or present.size < n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise DegenerateData(f"classes absent from training segments: {missing}")
    rng = np.random.default_rng(cfg.seed)
    tr, va = group_split(data.utterance, cfg.val_fraction, rng)
    model = SegmentModel(n_classes, data.X.shape[1:], body=body, seed=cfg.seed)
    train = (data.X[tr], data.y[tr])
    val = (data.X[va], data.y[va])
    history = fit(model, train, val, cfg, rng)
    return model, history


def embed_segments(model: SegmentModel, data: SegmentDataset):
    """Per-segment (utterance_id, start_frame, embedding, probabilities), in input order."""
    emb, prob = model.embed(data.X)
    return [(data.utterance[i], int(data.start[i]), emb[i], prob[i]) for i in range(len(data))]
