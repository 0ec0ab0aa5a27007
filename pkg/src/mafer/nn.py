"""Small CNN classifier: conv blocks, global average pooling, embedding, classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .rng import Xoshiro256pp
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    num_classes: int = 7

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            channels=tuple(int(c) for c in d["channels"]),
            embed_dim=int(d["embed_dim"]),
            num_classes=int(d["num_classes"]),
        )


def he_uniform(rng: Xoshiro256pp, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    n = int(np.prod(shape))
    return rng.uniform_array(n, -bound, bound).reshape(shape).astype(dtype)


@dataclass
class CnnModel:
    """``len(channels)`` blocks of (3x3 conv, ReLU, 2x2 max-pool), then GAP -> embedding -> classifier.

    ``forward`` returns ``(logits, features)`` where features are the embedding
    output that feeds the classifier.
    """

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "CnnModel":
        rng = Xoshiro256pp.derive(seed, "init")
        params: dict[str, Tensor] = {}
        cin = config.in_channels
        for i, cout in enumerate(config.channels):
            params[f"blocks.{i}.conv.weight"] = he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype)
            params[f"blocks.{i}.conv.bias"] = np.zeros(cout, dtype=dtype)
            cin = cout
        params["embedding.weight"] = he_uniform(rng, (config.embed_dim, cin), cin, dtype)
        params["embedding.bias"] = np.zeros(config.embed_dim, dtype=dtype)
        params["classifier.weight"] = he_uniform(rng, (config.num_classes, config.embed_dim), config.embed_dim, dtype)
        params["classifier.bias"] = np.zeros(config.num_classes, dtype=dtype)
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in params.items()})

    @property
    def num_blocks(self) -> int:
        return len(self.config.channels)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def classifier_params(self) -> list[str]:
        return [k for k in self.params if k.startswith("classifier.")]

    def backbone_params(self) -> list[str]:
        return [k for k in self.params if not k.startswith("classifier.")]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "CnnModel":
        return CnnModel(self.config, {k: Tensor(p.data.astype(dtype), requires_grad=True) for k, p in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        from .checkpoint import ShapeMismatchError

        missing = [k for k in self.params if k not in state]
        extra = [k for k in state if k not in self.params]
        if missing or extra:
            raise ShapeMismatchError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for k, p in self.params.items():
            if tuple(state[k].shape) != p.shape:
                raise ShapeMismatchError(
                    f"tensor {k!r}: checkpoint shape {tuple(state[k].shape)} != model shape {p.shape}"
                )
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype, copy=True)
            p.grad = None

    def forward(self, x) -> tuple[Tensor, Tensor]:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params["classifier.weight"].dtype))
        if x.data.ndim != 4:
            raise ValueError(f"expected a B x C x H x W batch, got shape {x.shape}")
        B, C, H, W = x.shape
        if C != self.config.in_channels:
            raise ValueError(f"input has {C} channels, model expects {self.config.in_channels}")
        m = 2 ** self.num_blocks
        if H % m or W % m:
            raise ValueError(f"input {H}x{W}: height and width must be multiples of {m} for {self.num_blocks} blocks")
        h = x
        for i in range(self.num_blocks):
            h = T.conv2d(h, self.params[f"blocks.{i}.conv.weight"], self.params[f"blocks.{i}.conv.bias"])
            h = T.max_pool2d(T.relu(h))
        pooled = T.global_avg_pool(h)
        features = T.linear(pooled, self.params["embedding.weight"], self.params["embedding.bias"])
        logits = T.linear(features, self.params["classifier.weight"], self.params["classifier.bias"])
        return logits, features

    __call__ = forward

    def predict(self, x, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Inference helper: returns (logits, features) as numpy arrays, no graph kept."""
        x = np.asarray(x)
        logits, feats = [], []
        for i in range(0, len(x), batch_size):
            lo, fe = self.forward(Tensor(x[i:i + batch_size].astype(self.params["classifier.weight"].dtype)))
            logits.append(lo.data)
            feats.append(fe.data)
        K, D = self.config.num_classes, self.config.embed_dim
        if not logits:
            return np.zeros((0, K)), np.zeros((0, D))
        return np.concatenate(logits), np.concatenate(feats)
