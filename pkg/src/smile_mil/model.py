"""The scale-adaptive attention MIL head and the three pooling baselines.

One bag flows through: batch-norm + linear + ReLU feature adapter, gated
(tanh * sigmoid) attention scoring, max-min-normalized threshold masking with
factor-scaled softmax, attention-weighted aggregation, and a sigmoid linear
classifier. Masking is a stop-gradient decision: the indicator is computed
from the current raw scores and enters the graph as a constant multiplier, so
masked scores carry exactly ``factor`` on their gradient path and unmasked
scores carry 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import FeatureBag

__all__ = [
    "ScaleConfig",
    "SmileParams",
    "AttentionTrace",
    "BagGraph",
    "MODEL_KINDS",
    "init_smile_params",
    "max_min_normalize",
    "scale_mask",
    "scale_adaptive_attention",
    "stable_softmax",
    "gated_attention",
    "feature_adapter",
    "aggregate",
    "classify",
    "build_bag_graph",
    "predict_bag",
    "baseline_pool",
]

MODEL_KINDS = ("smile", "abmil", "maxpool", "meanpool")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ScaleConfig:
    """Scale-adaptive hyperparameters: instances whose max-min-normalized raw
    attention score reaches ``threshold`` get their raw score multiplied by
    ``factor`` before the softmax."""

    threshold: float = 0.5
    factor: float = 0.5

    def __post_init__(self):
        if self.threshold < 0.0:
            raise ValueError(f"threshold must be non-negative, got {self.threshold}")
        if not 0.0 < self.factor <= 1.0:
            raise ValueError(f"factor must lie in (0, 1], got {self.factor}")


@dataclass
class SmileParams:
    """All trainable tensors plus the (non-trainable) batch-norm running
    statistics. Vectors are kept 1-D; the graph views them as rows/columns."""

    bn_gamma: np.ndarray          # (l,)
    bn_beta: np.ndarray           # (l,)
    bn_running_mean: np.ndarray   # (l,) non-trainable
    bn_running_var: np.ndarray    # (l,) non-trainable
    adapter_weight: np.ndarray    # (l, d)
    adapter_bias: np.ndarray      # (d,)
    attn_v: np.ndarray            # (e, d)
    attn_u: np.ndarray            # (e, d)
    attn_w: np.ndarray            # (1, e)
    clf_weight: np.ndarray        # (d,)
    clf_bias: np.ndarray          # (1, 1)

    @property
    def feature_dim(self) -> int:
        return self.adapter_weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.adapter_weight.shape[1]

    @property
    def attn_dim(self) -> int:
        return self.attn_v.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
            "adapter_weight": self.adapter_weight,
            "adapter_bias": self.adapter_bias,
            "attn_v": self.attn_v,
            "attn_u": self.attn_u,
            "attn_w": self.attn_w,
            "clf_weight": self.clf_weight,
            "clf_bias": self.clf_bias,
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.trainable())
        out["bn_running_mean"] = self.bn_running_mean
        out["bn_running_var"] = self.bn_running_var
        return out

    def copy(self) -> "SmileParams":
        return SmileParams(**{k: v.copy() for k, v in vars(self).items()})


def _uniform_fan(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_smile_params(feature_dim: int, hidden_dim: int = 256, attn_dim: int = 64,
                      seed: int = 0) -> SmileParams:
    """Symmetric uniform init for weights, zeros for biases, identity batch
    norm; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    l, d, e = feature_dim, hidden_dim, attn_dim
    if min(l, d, e) < 1:
        raise ValueError("all model dimensions must be positive")
    return SmileParams(
        bn_gamma=np.ones(l),
        bn_beta=np.zeros(l),
        bn_running_mean=np.zeros(l),
        bn_running_var=np.ones(l),
        adapter_weight=_uniform_fan(rng, l, d, (l, d)),
        adapter_bias=np.zeros(d),
        attn_v=_uniform_fan(rng, d, e, (e, d)),
        attn_u=_uniform_fan(rng, d, e, (e, d)),
        attn_w=_uniform_fan(rng, e, 1, (1, e)),
        clf_weight=_uniform_fan(rng, d, 1, (d,)),
        clf_bias=np.zeros((1, 1)),
    )


@dataclass
class AttentionTrace:
    """Per-instance view of one attention pass: raw gated scores, their
    max-min normalization, the {0,1} scale mask, and the final softmax
    weights (which always sum to one)."""

    raw_scores: np.ndarray
    normalized: np.ndarray
    mask: np.ndarray
    weights: np.ndarray

    def to_record(self, bag_id: str) -> dict:
        return {
            "bag_id": bag_id,
            "raw_scores": [float(v) for v in self.raw_scores],
            "mask": [int(v) for v in self.mask],
            "weights": [float(v) for v in self.weights],
        }


def max_min_normalize(scores: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); a constant vector maps to all zeros, meaning
    no instance stands out and nothing gets masked for positive thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def scale_mask(normalized: np.ndarray, threshold: float) -> np.ndarray:
    """Unit step at the threshold, inclusive at equality."""
    return (np.asarray(normalized) >= threshold).astype(np.float64)


def stable_softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    e = np.exp(scores - scores.max())
    return e / e.sum()


def scale_adaptive_attention(raw_scores: np.ndarray, cfg: ScaleConfig) -> AttentionTrace:
    """Mask instances whose normalized score reaches the threshold, shrink
    their raw scores by the factor, softmax the result."""
    raw_scores = np.asarray(raw_scores, dtype=np.float64)
    normalized = max_min_normalize(raw_scores)
    mask = scale_mask(normalized, cfg.threshold)
    multiplier = (1.0 - mask) + cfg.factor * mask
    weights = stable_softmax(raw_scores * multiplier)
    return AttentionTrace(raw_scores.copy(), normalized, mask, weights)


def gated_attention(hidden: np.ndarray, params: SmileParams) -> np.ndarray:
    """Raw unnormalized attention scores: w . (tanh(V h) * sigmoid(U h))."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape[1] != params.hidden_dim:
        raise ValueError(
            f"hidden features have dim {hidden.shape[1]}, attention expects {params.hidden_dim}"
        )
    gate = np.tanh(hidden @ params.attn_v.T) * _sigmoid(hidden @ params.attn_u.T)
    return (gate @ params.attn_w.T).ravel()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def aggregate(hidden: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of instance features."""
    hidden = np.asarray(hidden, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if hidden.shape[0] != weights.shape[0]:
        raise ValueError(f"{hidden.shape[0]} instances but {weights.shape[0]} weights")
    return weights @ hidden


def classify(pooled: np.ndarray, params: SmileParams) -> float:
    """Sigmoid linear head on the pooled bag feature."""
    pooled = np.asarray(pooled, dtype=np.float64).ravel()
    if pooled.shape[0] != params.hidden_dim:
        raise ValueError(
            f"pooled feature has dim {pooled.shape[0]}, classifier expects {params.hidden_dim}"
        )
    score = float(params.clf_weight @ pooled) + float(params.clf_bias[0, 0])
    return float(_sigmoid(np.array(score)))


@dataclass
class BagGraph:
    """A built forward graph for one bag: the probability root, the adapted
    feature node, the parameter nodes keyed by tensor name, and the attention
    trace (None for max/mean pooling)."""

    prob: ad.Node
    hidden: ad.Node
    param_nodes: dict[str, ad.Node]
    trace: Optional[AttentionTrace]


def _update_running_stats(params: SmileParams, features: np.ndarray) -> None:
    mean, var = ad.batch_moments(features)
    n = features.shape[0]
    # unbiased variance feeds the running estimate when possible
    var_running = var * (n / (n - 1.0)) if n > 1 else var
    params.bn_running_mean += BN_MOMENTUM * (mean.ravel() - params.bn_running_mean)
    params.bn_running_var += BN_MOMENTUM * (var_running.ravel() - params.bn_running_var)


def build_bag_graph(bag: FeatureBag, params: SmileParams, cfg: ScaleConfig,
                    mode: str = "eval", kind: str = "smile") -> BagGraph:
    """Assemble the forward graph for one bag.

    In train mode the adapter uses per-bag batch statistics and the running
    statistics are updated once, with momentum, as a side effect.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if bag.features.shape[1] != params.feature_dim:
        raise ValueError(
            f"bag '{bag.bag_id}' has feature dim {bag.features.shape[1]}, "
            f"adapter expects {params.feature_dim}"
        )

    p = {name: ad.parameter(arr.reshape(1, -1) if arr.ndim == 1 else arr, name=name)
         for name, arr in params.trainable().items()}

    training = mode == "train"
    if training:
        _update_running_stats(params, bag.features)

    feats = ad.constant(bag.features, name="features")
    normed = ad.batchnorm(
        feats, p["bn_gamma"], p["bn_beta"], training=training,
        running_mean=params.bn_running_mean, running_var=params.bn_running_var,
        eps=BN_EPS, name="adapter_bn",
    )
    hidden = ad.relu(
        ad.add(ad.matmul(normed, p["adapter_weight"], name="adapter_linear"), p["adapter_bias"]),
        name="hidden",
    )

    trace = None
    if kind == "maxpool":
        pooled = ad.colmax(hidden, name="maxpool")
    elif kind == "meanpool":
        n = bag.features.shape[0]
        uniform = ad.constant(np.full((1, n), 1.0 / n), name="meanpool_weights")
        pooled = ad.matmul(uniform, hidden, name="meanpool")
    else:
        gate = ad.mul(
            ad.tanh(ad.matmul(hidden, ad.transpose(p["attn_v"]), name="attn_tanh_branch")),
            ad.sigmoid(ad.matmul(hidden, ad.transpose(p["attn_u"]), name="attn_gate_branch")),
            name="gate",
        )
        scores = ad.matmul(p["attn_w"], ad.transpose(gate), name="raw_scores")  # (1, n)
        raw = ad.evaluate(scores).ravel()
        if kind == "abmil":
            trace_cfg = ScaleConfig(threshold=cfg.threshold, factor=1.0)
            weights_node = ad.softmax(scores, name="attention")
        else:
            trace_cfg = cfg
            normalized = max_min_normalize(raw)
            mask = scale_mask(normalized, cfg.threshold)
            multiplier = (1.0 - mask) + cfg.factor * mask
            scaled = ad.mul(scores, ad.constant(multiplier.reshape(1, -1), name="scale_multiplier"))
            weights_node = ad.softmax(scaled, name="attention")
        trace = scale_adaptive_attention(raw, trace_cfg)
        pooled = ad.matmul(weights_node, hidden, name="bag_feature")

    logit = ad.add(
        ad.matmul(pooled, ad.transpose(p["clf_weight"]), name="clf_linear"),
        p["clf_bias"],
    )
    prob = ad.sigmoid(logit, name="probability")
    return BagGraph(prob=prob, hidden=hidden, param_nodes=p, trace=trace)


def feature_adapter(bag: FeatureBag, params: SmileParams, mode: str = "eval") -> np.ndarray:
    """The adapted (n, d) instance features: ReLU(Linear(BatchNorm(T)))."""
    graph = build_bag_graph(bag, params, ScaleConfig(), mode=mode, kind="meanpool")
    return ad.evaluate_missing(graph.hidden).copy()


def predict_bag(bag: FeatureBag, params: SmileParams, cfg: ScaleConfig,
                mode: str = "eval") -> tuple[float, AttentionTrace]:
    """Bag probability plus the attention trace."""
    graph = build_bag_graph(bag, params, cfg, mode=mode, kind="smile")
    prob = float(ad.evaluate_missing(graph.prob)[0, 0])
    return prob, graph.trace


def baseline_pool(bag: FeatureBag, params: SmileParams, kind: str,
                  mode: str = "eval") -> float:
    """Probability under one of the baselines: max or mean pooling of adapted
    features, or plain-softmax gated attention."""
    if kind not in ("max", "mean", "abmil"):
        raise ValueError(f"baseline kind must be max, mean, or abmil, got {kind!r}")
    graph_kind = {"max": "maxpool", "mean": "meanpool", "abmil": "abmil"}[kind]
    graph = build_bag_graph(bag, params, ScaleConfig(), mode=mode, kind=graph_kind)
    return float(ad.evaluate_missing(graph.prob)[0, 0])
