"""Three-layer GIN regressor with sum readout, trained on MAPE.

Per GIN layer (epsilon fixed at 0)::

    z_v  = h_v + mean_{u in N(v)} h_u
    h'_v = relu(W2 relu(W1 z_v + b1) + b2)

Readout sums the last-layer states over all nodes and a two-layer head maps
the sum to ``o``. The head predicts a positive log-ratio over a floor below
every training label, ``log(y / label_scale) ~ softplus(o)``, so the
prediction is ``label_scale * exp(softplus(o))``. Working in log space keeps
labels spanning several decades well conditioned.
The backward pass is written out by hand; ``gradient_check`` compares it
against central finite differences.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .archgraph import FEATURE_WIDTH, NUM_TYPES, featurize
from .cosim import Record, dataset_fingerprint, lut_estimate
from .design_space import Architecture
from .lut import PerfLUT, analytic_lut
from .profiles import SystemConfig

log = logging.getLogger(__name__)

FORMAT = "coforge-gin"
FORMAT_VERSION = 1
NUM_GIN_LAYERS = 3
# label_scale is this fraction of the smallest training label
LABEL_FLOOR = 0.5
PARAM_NAMES = tuple(f"{p}{l}" for l in range(NUM_GIN_LAYERS) for p in ("W1_", "b1_", "W2_", "b2_")) + (
    "Wa", "ba", "Wb", "bb")


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over batch and node of a[..., i] * b[..., j]"""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GraphBatch:
    """Padded graphs: features (B, n, d), mean operators (B, n, n), node mask (B, n)."""

    x: np.ndarray
    m: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "GraphBatch":
        return GraphBatch(self.x[idx], self.m[idx], self.mask[idx])


def pack_graphs(items: Sequence[tuple], n_max: int | None = None) -> GraphBatch:
    """``items`` are ``(ArchGraph, features)`` pairs."""
    if not items:
        raise ValueError("no graphs to pack")
    n_max = n_max or max(g.num_nodes for g, _ in items)
    d = items[0][1].shape[1]
    x = np.zeros((len(items), n_max, d))
    m = np.zeros((len(items), n_max, n_max))
    mask = np.zeros((len(items), n_max))
    for i, (g, feats) in enumerate(items):
        n = g.num_nodes
        x[i, :n] = feats
        m[i, :n, :n] = g.mean_operator()
        mask[i, :n] = 1.0
    return GraphBatch(x, m, mask)


@dataclass
class PredictorModel:
    params: dict
    metric: str = "latency"
    input_width: int = FEATURE_WIDTH
    hidden: int = 64
    label_scale: float = 1.0
    enhanced: bool = True
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, input_width: int = FEATURE_WIDTH, hidden: int = 64, seed: int = 0,
             metric: str = "latency", label_scale: float = 1.0, enhanced: bool = True) -> "PredictorModel":
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        params = {}
        d = input_width
        for l in range(NUM_GIN_LAYERS):
            params[f"W1_{l}"] = dense(d, hidden)
            params[f"b1_{l}"] = np.zeros(hidden)
            params[f"W2_{l}"] = dense(hidden, hidden)
            params[f"b2_{l}"] = np.zeros(hidden)
            d = hidden
        params["Wa"] = dense(hidden, hidden)
        params["ba"] = np.zeros(hidden)
        params["Wb"] = dense(hidden, 1)
        params["bb"] = np.zeros(1)
        return cls(params, metric, input_width, hidden, label_scale, enhanced)

    # --- forward / backward --------------------------------------------------

    def _forward(self, batch: GraphBatch):
        if batch.x.shape[2] != self.input_width:
            raise ValueError(f"feature width {batch.x.shape[2]} does not match model width {self.input_width}")
        p = self.params
        h = batch.x
        cache = []
        for l in range(NUM_GIN_LAYERS):
            z = h + batch.m @ h
            a1 = z @ p[f"W1_{l}"] + p[f"b1_{l}"]
            h1 = np.maximum(a1, 0.0)
            a2 = h1 @ p[f"W2_{l}"] + p[f"b2_{l}"]
            h_next = np.maximum(a2, 0.0)
            cache.append((z, a1, h1, a2))
            h = h_next
        g = (batch.mask[:, :, None] * h).sum(axis=1)
        pa = g @ p["Wa"] + p["ba"]
        ha = np.maximum(pa, 0.0)
        o = (ha @ p["Wb"])[:, 0] + p["bb"][0]
        y = self.label_scale * np.exp(softplus(o))
        return y, (cache, g, pa, ha, o)

    def forward(self, batch: GraphBatch) -> np.ndarray:
        return self._forward(batch)[0]

    def loss_and_grads(self, batch: GraphBatch, labels: np.ndarray, kind: str = "mape"):
        """Batch loss and its gradient for every parameter.

        ``kind`` is "mape" or "log", the mean of |log(pred / label)|.
        """
        p = self.params
        y, (cache, g, pa, ha, o) = self._forward(batch)
        B = len(labels)
        err = y - labels
        if kind == "mape":
            loss = float(np.mean(np.abs(err) / labels))
            dy = np.sign(err) / (labels * B)
        elif kind == "log":
            loss = float(np.mean(np.abs(np.log(y) - np.log(labels))))
            dy = np.sign(err) / (y * B)
        else:
            raise ValueError(f"unknown loss {kind!r}")
        do = dy * y * sigmoid(o)
        grads = {}
        grads["Wb"] = ha.T @ do[:, None]
        grads["bb"] = np.array([do.sum()])
        dha = do[:, None] * p["Wb"][:, 0][None, :]
        dpa = dha * (pa > 0)
        grads["Wa"] = g.T @ dpa
        grads["ba"] = dpa.sum(axis=0)
        dg = dpa @ p["Wa"].T
        dh = batch.mask[:, :, None] * dg[:, None, :]
        mt = np.swapaxes(batch.m, 1, 2)
        for l in reversed(range(NUM_GIN_LAYERS)):
            z, a1, h1, a2 = cache[l]
            da2 = dh * (a2 > 0)
            grads[f"W2_{l}"] = _outer_sum(h1, da2)
            grads[f"b2_{l}"] = da2.sum(axis=(0, 1))
            dh1 = da2 @ p[f"W2_{l}"].T
            da1 = dh1 * (a1 > 0)
            grads[f"W1_{l}"] = _outer_sum(z, da1)
            grads[f"b1_{l}"] = da1.sum(axis=(0, 1))
            dz = da1 @ p[f"W1_{l}"].T
            dh = dz + mt @ dz
        return loss, grads

    def loss(self, batch: GraphBatch, labels: np.ndarray) -> float:
        y = self.forward(batch)
        return float(np.mean(np.abs(y - labels) / labels))

    # --- persistence -------------------------------------------------------------

    def to_json(self) -> dict:
        return {"format": FORMAT, "version": FORMAT_VERSION, "metric": self.metric,
                "input_width": self.input_width, "hidden": self.hidden, "label_scale": self.label_scale,
                "enhanced": self.enhanced, "epsilon": 0.0, "meta": self.meta,
                "params": {k: self.params[k].tolist() for k in PARAM_NAMES}}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, d: dict, expected_width: int | None = None) -> "PredictorModel":
        if d.get("format") != FORMAT or d.get("version") != FORMAT_VERSION:
            raise ModelFormatError(f"not a {FORMAT} v{FORMAT_VERSION} model")
        width = int(d["input_width"])
        if expected_width is not None and width != expected_width:
            raise ModelFormatError(f"model feature width {width} != expected {expected_width}")
        params = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
        if set(params) != set(PARAM_NAMES):
            raise ModelFormatError("parameter set mismatch")
        for k, v in params.items():
            if not np.all(np.isfinite(v)):
                raise ModelFormatError(f"non-finite values in {k}")
        return cls(params, d["metric"], width, int(d["hidden"]), float(d["label_scale"]),
                   bool(d.get("enhanced", True)), d.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path, expected_width: int | None = None) -> "PredictorModel":
        return cls.from_json(json.loads(Path(path).read_text()), expected_width)


# --- data encoding -------------------------------------------------------------

def encode(archs: Sequence[Architecture], metric: str, lut: PerfLUT, sys: SystemConfig,
           enhanced: bool = True, n_max: int | None = None) -> GraphBatch:
    return pack_graphs([featurize(a, metric, lut, sys, enhanced) for a in archs], n_max)


def labels_of(records: Sequence[Record], metric: str) -> np.ndarray:
    if metric == "latency":
        y = np.array([r.latency_s for r in records])
    elif metric == "energy":
        y = np.array([r.energy_j for r in records])
    else:
        raise ValueError(f"unknown metric {metric!r}")
    if np.any(y <= 0):
        raise TrainingError("labels must be positive")
    return y


# --- training --------------------------------------------------------------------

@dataclass(frozen=True)
class HyperParams:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # "constant" keeps lr fixed; "cosine" anneals it to 0 over the run
    schedule: str = "constant"
    # leading epochs on |log(pred / label)| before switching to MAPE
    warmup_epochs: int = 5

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + np.cos(np.pi * epoch / self.epochs))
        raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class TrainReport:
    train_mape: float
    val_mape: float
    within_10: float
    within_20: float
    ranking: float
    n_train: int
    n_val: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


class Adam:
    def __init__(self, params: dict, hp: HyperParams):
        self.hp = hp
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        hp = self.hp
        lr = hp.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - hp.beta1 ** self.t
        c2 = 1.0 - hp.beta2 ** self.t
        for k in PARAM_NAMES:
            g = grads[k]
            self.m[k] = hp.beta1 * self.m[k] + (1.0 - hp.beta1) * g
            self.v[k] = hp.beta2 * self.v[k] + (1.0 - hp.beta2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + hp.eps)


def fit(model: PredictorModel, batch: GraphBatch, labels: np.ndarray, hp: HyperParams, seed: int) -> list[float]:
    """Mini-batch Adam: ``hp.warmup_epochs`` on the log-ratio loss, then MAPE.

    Returns the per-epoch mean of whichever loss that epoch optimized.
    """
    rng = np.random.default_rng([seed, 7])
    opt = Adam(model.params, hp)
    n = len(labels)
    history = []
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        lr = hp.lr_at(epoch)
        kind = "log" if epoch < hp.warmup_epochs else "mape"
        total = 0.0
        for s in range(0, n, hp.batch_size):
            idx = np.sort(order[s:s + hp.batch_size])
            loss, grads = model.loss_and_grads(batch.take(idx), labels[idx], kind)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch offset {s}")
            opt.step(model.params, grads, lr)
            total += loss * len(idx)
        history.append(total / n)
        if epoch % 50 == 0 or epoch == hp.epochs - 1:
            log.debug("epoch %d train MAPE %.4f", epoch, history[-1])
    return history


def train(records: Sequence[Record], metric: str, sys: SystemConfig, hp: HyperParams = HyperParams(),
          seed: int = 0, lut: PerfLUT | None = None, enhanced: bool = True):
    """Train on the ``train`` split and report on the ``val`` split."""
    train_recs = [r for r in records if r.split == "train"]
    val_recs = [r for r in records if r.split == "val"]
    if not train_recs:
        raise TrainingError("empty training split")
    lut = lut or analytic_lut(sys)
    n_max = max(len(r.arch) for r in records) + 1
    xb = encode([r.arch for r in train_recs], metric, lut, sys, enhanced, n_max)
    y = labels_of(train_recs, metric)
    width = xb.x.shape[2]
    model = PredictorModel.init(width, hp.hidden, seed, metric, LABEL_FLOOR * float(y.min()), enhanced)
    # Every graph starts at the median label: zero output weights plus a matching
    # bias. Random output weights put the initial logits far up the exp curve,
    # and the first corrections then drive everything onto the label floor,
    # where the gradient vanishes.
    model.params["Wb"][:] = 0.0
    model.params["bb"][0] = np.log(np.expm1(np.log(float(np.median(y)) / model.label_scale)))
    history = fit(model, xb, y, hp, seed)
    model.meta = {"epochs": hp.epochs, "warmup_epochs": hp.warmup_epochs, "seed": seed, "lr": hp.lr,
                  "batch_size": hp.batch_size,
                  "dataset": dataset_fingerprint(records), "sys": sys.fingerprint(),
                  "lut": lut.fingerprint}
    train_mape = model.loss(xb, y)
    if val_recs:
        vb = encode([r.arch for r in val_recs], metric, lut, sys, enhanced, n_max)
        yv = labels_of(val_recs, metric)
        m = evaluate(model.forward(vb), yv, seed=seed)
    else:
        m = {"mape": float("nan"), "within_10": float("nan"), "within_20": float("nan"),
             "ranking": float("nan")}
    report = TrainReport(train_mape, m["mape"], m["within_10"], m["within_20"], m["ranking"],
                         len(train_recs), len(val_recs))
    return model, report, history


# --- metrics -------------------------------------------------------------------

def within(pred: np.ndarray, y: np.ndarray, bound: float) -> float:
    # small slack so a prediction sitting exactly on the bound counts as inside
    return float(np.mean(np.abs(pred - y) / y <= bound + 1e-12))


def ranking_accuracy(pred: np.ndarray, y: np.ndarray, n_pairs: int = 10_000, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 18])
    n = len(y)
    if n < 2:
        return float("nan")
    i = rng.integers(n, size=n_pairs)
    j = rng.integers(n, size=n_pairs)
    sy = np.sign(y[i] - y[j])
    sp = np.sign(pred[i] - pred[j])
    keep = (sy != 0) & (sp != 0)
    if not keep.any():
        return float("nan")
    return float(np.mean(sy[keep] == sp[keep]))


def evaluate(pred: np.ndarray, y: np.ndarray, seed: int = 0) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return {"mape": float(np.mean(np.abs(pred - y) / y)), "within_10": within(pred, y, 0.10),
            "within_20": within(pred, y, 0.20), "ranking": ranking_accuracy(pred, y, seed=seed)}


def evaluate_model(model: PredictorModel, records: Sequence[Record], sys: SystemConfig,
                   lut: PerfLUT | None = None, seed: int = 0) -> dict:
    lut = lut or analytic_lut(sys)
    batch = encode([r.arch for r in records], model.metric, lut, sys, model.enhanced)
    return evaluate(model.forward(batch), labels_of(records, model.metric), seed)


# --- inference helpers ---------------------------------------------------------------

def predict(model: PredictorModel, archs: Sequence[Architecture], sys: SystemConfig,
            lut: PerfLUT | None = None) -> np.ndarray:
    lut = lut or analytic_lut(sys)
    return model.forward(encode(archs, model.metric, lut, sys, model.enhanced))


def predict_corrected(model: PredictorModel, arch: Architecture, sys: SystemConfig,
                      lut: PerfLUT | None = None) -> float:
    """Latency prediction floored at the LUT lower bound."""
    if model.metric != "latency":
        raise ValueError("LUT correction applies to latency models only")
    lut = lut or analytic_lut(sys)
    raw = float(predict(model, [arch], sys, lut)[0])
    return correct(raw, lut_estimate(arch, sys, lut))


def correct(predicted: float, lut_floor: float) -> float:
    return predicted if predicted >= lut_floor else lut_floor


# --- gradient verification -------------------------------------------------------------

@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    checked: int
    kinks: int


def _loss_and_pattern(model: PredictorModel, batch: GraphBatch, labels: np.ndarray, kind: str):
    """Loss plus the on/off pattern of every piecewise-linear unit it passes through."""
    y, (cache, _, pa, _, _) = model._forward(batch)
    parts = [(a > 0).tobytes() for c in cache for a in (c[1], c[3])]
    parts += [(pa > 0).tobytes(), (y > labels).tobytes()]
    if kind == "log":
        return float(np.mean(np.abs(np.log(y) - np.log(labels)))), b"".join(parts)
    return float(np.mean(np.abs(y - labels) / labels)), b"".join(parts)


def gradient_check(model: PredictorModel, batch: GraphBatch, labels: np.ndarray, h: float = 1e-5,
                   floor: float = 1e-6, kind: str = "mape") -> GradCheck:
    """Compare the hand-written backward pass with central differences.

    Error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    A coordinate whose +h and -h evaluations sit on different sides of a ReLU
    or absolute-value kink has no valid central difference. It is retried with
    h / 100, and if that still straddles the kink it is counted in ``kinks``
    and left out of the maximum.
    """
    _, grads = model.loss_and_grads(batch, labels, kind)
    worst = 0.0
    checked = kinks = 0
    for name in PARAM_NAMES:
        flat = model.params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            for step in (h, h / 100.0):
                flat[i] = old + step
                up, pat_up = _loss_and_pattern(model, batch, labels, kind)
                flat[i] = old - step
                down, pat_down = _loss_and_pattern(model, batch, labels, kind)
                flat[i] = old
                if pat_up == pat_down:
                    break
            if pat_up != pat_down:
                kinks += 1
                continue
            num = (up - down) / (2.0 * step)
            ana = gflat[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
            checked += 1
    return GradCheck(worst, checked, kinks)


ONEHOT_WIDTH = NUM_TYPES
