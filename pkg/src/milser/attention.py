"""Bag-level classifiers over segment embeddings.

Five aggregator kinds share a two-layer ReLU trunk (M -> H -> H, H = 120):

``dsingle``  decision-level attention: per-class weighted sum of instance
             predictions, weights normalised over the bag.
``dmulti``   two decision-level attention modules, one after each trunk
             layer; their bag vectors are concatenated and classified.
``feature``  feature-level attention: per-dimension weighted sum of a
             D-wide instance representation, then a softmax classifier.
``maxpool``  max over instance predictions (renormalised for reporting).
``avgpool``  mean over instance predictions.

Padded rows are excluded from every sum and max unless ``masked=False``.
All backward passes are written out by hand.
"""

from __future__ import annotations

import numpy as np

from .bagging import Bag, BagSet
from .errors import DegenerateData, ShapeMismatch
from .neuralcore.layers import he_uniform, prob_cross_entropy, sigmoid, softmax, softmax_cross_entropy
from .neuralcore.optim import TrainConfig
from .neuralcore.training import TrainLog, fit, group_split

KINDS = ("dsingle", "dmulti", "feature", "maxpool", "avgpool")
HIDDEN = 120
FEATURE_DIM = 256


# -- pooling primitives -------------------------------------------------------

def attention_pool(values, scores, mask):
    """Normalise non-negative ``scores`` over unmasked rows and pool ``values``.

    values, scores: (B, T, C); mask: (B, T). Returns (pooled (B, C), weights (B, T, C)).
    Works per channel, so it serves both decision-level (C = K) and
    feature-level (C = D) attention.
    """
    m = mask[..., None].astype(scores.dtype)
    a = scores * m
    w = a / a.sum(axis=1, keepdims=True)
    return (w * values).sum(axis=1), w


def softmax_backward(p, dp):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def renormalize(F):
    return F / F.sum(axis=-1, keepdims=True)


def renormalize_backward(F, dP):
    S = F.sum(axis=-1, keepdims=True)
    P = F / S
    return (dP - (dP * P).sum(axis=-1, keepdims=True)) / S


def masked_mean(values, mask):
    m = mask[..., None].astype(values.dtype)
    return (values * m).sum(axis=1) / m.sum(axis=1)


def masked_max(values, mask):
    """Max over unmasked rows; returns (max (B, C), argmax index (B, C))."""
    filled = np.where(mask[..., None], values, -np.inf)
    idx = filled.argmax(axis=1)
    return np.take_along_axis(values, idx[:, None, :], axis=1)[:, 0], idx


# -- model ---------------------------------------------------------------------

class AggregatorModel:
    def __init__(self, kind, n_features=64, n_classes=4, hidden=HIDDEN, feature_dim=FEATURE_DIM,
                 masked=True, seed=0, dtype=np.float32, t_max=None):
        if kind not in KINDS:
            raise ValueError(f"unknown aggregator kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.M, self.K, self.H, self.D = int(n_features), int(n_classes), int(hidden), int(feature_dim)
        self.masked = bool(masked)
        self.seed = int(seed)
        self.t_max = t_max
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        M, K, H, D = self.M, self.K, self.H, self.D
        shapes = {"W1": (M, H), "W2": (H, H)}
        if kind == "dsingle":
            shapes.update(Wf=(H, K), Ws=(H, K))
        elif kind == "dmulti":
            shapes.update(Wf1=(H, K), Ws1=(H, K), Wf2=(H, K), Ws2=(H, K), Wo=(2 * K, K))
        elif kind == "feature":
            shapes.update(Wq=(H, D), Wu=(H, D), Wg=(D, K))
        else:
            shapes.update(Wf=(H, K))
        self.params = {}
        for name, shape in shapes.items():
            self.params[name] = he_uniform(rng, shape[0], shape, self.dtype)
            self.params["b" + name[1:]] = np.zeros(shape[1], dtype=self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return self

    def architecture(self) -> dict:
        return {"kind": self.kind, "n_features": self.M, "n_classes": self.K, "hidden": self.H,
                "feature_dim": self.D, "masked": self.masked, "t_max": self.t_max}

    # forward ----------------------------------------------------------------

    def _lin(self, x, name):
        p = self.params
        return x @ p["W" + name] + p["b" + name]

    def forward(self, X, mask):
        """Run the model, returning a cache dict; ``cache['P']`` holds (B, K) probabilities."""
        X = np.asarray(X, dtype=self.dtype)
        mask = np.asarray(mask, dtype=bool)
        if X.ndim != 3 or X.shape[2] != self.M:
            raise ShapeMismatch(f"bags must be (B, T, {self.M}), got {X.shape}")
        if mask.shape != X.shape[:2]:
            raise ShapeMismatch(f"mask shape {mask.shape} does not match bags {X.shape[:2]}")
        if not self.masked:
            mask = np.ones_like(mask)
        c = {"X": X, "mask": mask}
        z1 = self._lin(X, "1")
        h1 = np.maximum(z1, 0)
        z2 = self._lin(h1, "2")
        h2 = np.maximum(z2, 0)
        c.update(z1=z1, h1=h1, z2=z2, h2=h2)

        kind = self.kind
        if kind == "dsingle":
            f = softmax(self._lin(h2, "f"))
            s = softmax(self._lin(h2, "s"))
            F, w = attention_pool(f, s, mask)
            c.update(f=f, s=s, w=w, F=F, P=renormalize(F))
        elif kind == "dmulti":
            for i, h in (("1", h1), ("2", h2)):
                f = softmax(self._lin(h, "f" + i))
                s = softmax(self._lin(h, "s" + i))
                F, w = attention_pool(f, s, mask)
                c.update({"f" + i: f, "s" + i: s, "w" + i: w, "F" + i: F})
            cat = np.concatenate([c["F1"], c["F2"]], axis=-1)
            logits = self._lin(cat, "o")
            c.update(cat=cat, logits=logits, P=softmax(logits))
        elif kind == "feature":
            q = self._lin(h2, "q")
            u = sigmoid(self._lin(h2, "u"))
            U, v = attention_pool(q, u, mask)
            logits = self._lin(U, "g")
            c.update(q=q, u=u, v=v, U=U, logits=logits, P=softmax(logits))
        elif kind == "maxpool":
            f = softmax(self._lin(h2, "f"))
            F, idx = masked_max(f, mask)
            c.update(f=f, F=F, idx=idx, P=renormalize(F))
        else:
            f = softmax(self._lin(h2, "f"))
            F = masked_mean(f, mask)
            c.update(f=f, F=F, P=F)
        return c

    def predict_proba(self, X, mask, batch_size=512):
        out = [self.forward(X[i:i + batch_size], mask[i:i + batch_size])["P"]
               for i in range(0, len(X), batch_size)]
        return np.concatenate(out).astype(np.float64)

    def predict(self, X, mask):
        # argmax takes the lowest index on ties
        return self.predict_proba(X, mask).argmax(axis=1)

    def predict_bags(self, bags: BagSet):
        return self.predict(bags.X, bags.mask)

    def attention_weights(self, X, mask):
        """Per-row attention weights: w (B, T, K) for dsingle, v (B, T, D) for feature,
        (w1, w2) for dmulti; None for the pooling kinds."""
        c = self.forward(X, mask)
        if self.kind == "dsingle":
            return c["w"]
        if self.kind == "feature":
            return c["v"]
        if self.kind == "dmulti":
            return c["w1"], c["w2"]
        return None

    # loss / backward --------------------------------------------------------

    def _loss_from_cache(self, c, y):
        if "logits" in c:
            return softmax_cross_entropy(c["logits"], y)
        return prob_cross_entropy(c["P"], y)

    def loss(self, batch) -> float:
        X, mask, y = batch
        return self._loss_from_cache(self.forward(X, mask), y)[0]

    def loss_and_grads(self, batch):
        X, mask, y = batch
        c = self.forward(X, mask)
        loss, d = self._loss_from_cache(c, y)
        return loss, self.backward(c, d)

    def backward(self, c, d):
        """Parameter gradients given the cache and dLoss/d(logits) or dLoss/dP."""
        g = {}
        mask = c["mask"]
        dh2 = np.zeros_like(c["h2"])
        dh1 = np.zeros_like(c["h1"])
        kind = self.kind

        def lin_back(x, dout, name, need_input=True):
            g["W" + name] = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
            g["b" + name] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
            return dout @ self.params["W" + name].T if need_input else None

        def decision_back(dF, f, s, w, h, suffix):
            df, ds = attention_pool_backward_scores(dF, f, s, w, mask)
            dh = lin_back(h, softmax_backward(f, df), "f" + suffix)
            dh = dh + lin_back(h, softmax_backward(s, ds), "s" + suffix)
            return dh

        if kind == "dsingle":
            dF = renormalize_backward(c["F"], d)
            dh2 += decision_back(dF, c["f"], c["s"], c["w"], c["h2"], "")
        elif kind == "dmulti":
            dcat = lin_back(c["cat"], d, "o")
            K = self.K
            dh1 += decision_back(dcat[:, :K], c["f1"], c["s1"], c["w1"], c["h1"], "1")
            dh2 += decision_back(dcat[:, K:], c["f2"], c["s2"], c["w2"], c["h2"], "2")
        elif kind == "feature":
            dU = lin_back(c["U"], d, "g")
            dq, du = attention_pool_backward_scores(dU, c["q"], c["u"], c["v"], mask)
            u = c["u"]
            dh2 += lin_back(c["h2"], dq, "q")
            dh2 += lin_back(c["h2"], du * u * (1.0 - u), "u")
        elif kind == "maxpool":
            dF = renormalize_backward(c["F"], d)
            df = np.zeros_like(c["f"])
            np.put_along_axis(df, c["idx"][:, None, :], dF[:, None, :], axis=1)
            dh2 += lin_back(c["h2"], softmax_backward(c["f"], df), "f")
        else:
            m = mask[..., None].astype(c["f"].dtype)
            df = d[:, None, :] * m / m.sum(axis=1, keepdims=True)
            dh2 += lin_back(c["h2"], softmax_backward(c["f"], df), "f")

        dz2 = dh2 * (c["z2"] > 0)
        dh1 += lin_back(c["h1"], dz2, "2")
        dz1 = dh1 * (c["z1"] > 0)
        lin_back(c["X"], dz1, "1", need_input=False)
        return g


def attention_pool_backward_scores(dpooled, values, scores, weights, mask):
    """Gradients of ``attention_pool`` w.r.t. (values, scores).

    With a = scores * mask, w = a / sum_t a and pooled = sum_t w * values:
    d(scores)_t = mask_t * (dw_t - sum_t' dw_t' w_t') / sum_t a.
    """
    m = mask[..., None].astype(weights.dtype)
    g = dpooled[:, None, :]
    dvalues = weights * g
    dw = values * g
    total = (scores * m).sum(axis=1, keepdims=True)
    da = (dw - (dw * weights).sum(axis=1, keepdims=True)) / total
    return dvalues, da * m


# -- functional entry points ------------------------------------------------------

def _single(model, bag: Bag):
    return model.predict_proba(bag.embeddings[None], bag.mask[None])[0]


def d_single_forward(model, bag: Bag):
    return _single(model, bag)


def d_multi_forward(model, bag: Bag):
    return _single(model, bag)


def feature_att_forward(model, bag: Bag):
    return _single(model, bag)


def max_pool_forward(model, bag: Bag):
    return _single(model, bag)


def avg_pool_forward(model, bag: Bag):
    return _single(model, bag)


def train_aggregator(kind, bags: BagSet, cfg: TrainConfig, n_classes=None, hidden=HIDDEN,
                     feature_dim=FEATURE_DIM, masked=True) -> tuple[AggregatorModel, TrainLog]:
    """Fit one aggregator on bags; 10% of bags (by utterance) drive early stopping."""
    K = int(n_classes if n_classes is not None else bags.y.max() + 1)
    missing = sorted(set(range(K)) - set(np.unique(bags.y).tolist()))
    if missing or K < 2:
        raise DegenerateData(f"classes absent from training bags: {missing}")
    rng = np.random.default_rng(cfg.seed)
    tr, va = group_split(np.asarray(bags.ids), cfg.val_fraction, rng)
    model = AggregatorModel(kind, bags.X.shape[2], K, hidden, feature_dim, masked, seed=cfg.seed,
                            t_max=bags.X.shape[1])
    X = bags.X.astype(np.float32, copy=False)
    history = fit(model, (X[tr], bags.mask[tr], bags.y[tr]), (X[va], bags.mask[va], bags.y[va]), cfg, rng)
    return model, history
