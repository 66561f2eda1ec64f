"""Toy causal-attention policy with a hand-written reverse pass.

The model is a small pre-embedding transformer: token plus positional
embeddings, ``n_layers`` blocks of single-head causal attention and a GELU
feed-forward layer (both residual, no normalisation), and a linear head.
Attention masks are additive: blocked and future keys get ``-1e9`` before
the softmax so their weights are exactly zero.
"""

import math
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from rapo_lab.dist import ProbabilityVector
from rapo_lab.errors import LengthExceeded, NonFiniteLoss
from rapo_lab.models import PolicyConfig

MASK_VALUE = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


@dataclass(frozen=True)
class AttentionMaskSpec:
    """(query, key) pairs blocked on top of causal masking."""

    blocked: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        pairs = frozenset((int(q), int(k)) for q, k in self.blocked)
        if any(q < 0 or k < 0 for q, k in pairs):
            msg = 'mask positions must be non-negative'
            raise ValueError(msg)
        object.__setattr__(self, 'blocked', pairs)

    def __len__(self) -> int:
        return len(self.blocked)

    def union(self, other: 'AttentionMaskSpec') -> 'AttentionMaskSpec':
        return AttentionMaskSpec(self.blocked | other.blocked)

    @classmethod
    def block_keys(cls, queries: Iterable[int], keys: Iterable[int]) -> 'AttentionMaskSpec':
        keys = tuple(keys)
        return cls(frozenset((q, k) for q in queries for k in keys))

    def to_dense(self, length: int) -> np.ndarray:
        """Boolean (length, length) matrix of blocked pairs."""
        dense = np.zeros((length, length), dtype=bool)
        for q, k in self.blocked:
            if q >= length or k >= length:
                msg = f'mask pair ({q}, {k}) outside a sequence of length {length}'
                raise ValueError(msg)
            dense[q, k] = True
        return dense


NO_MASK = AttentionMaskSpec()

MaskLike = AttentionMaskSpec | Sequence[AttentionMaskSpec] | np.ndarray | None


def _causal_blocked(length: int) -> np.ndarray:
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def additive_mask(mask: MaskLike, batch: int, length: int) -> np.ndarray:
    """(batch, length, length) additive mask combining causal and extra blocks."""
    blocked = np.broadcast_to(_causal_blocked(length), (batch, length, length)).copy()
    if isinstance(mask, AttentionMaskSpec):
        blocked |= mask.to_dense(length)[None]
    elif isinstance(mask, np.ndarray):
        blocked |= np.broadcast_to(mask.astype(bool), (batch, length, length))
    elif mask is not None:
        if len(mask) != batch:
            msg = f'got {len(mask)} masks for a batch of {batch}'
            raise ValueError(msg)
        for row, spec in enumerate(mask):
            blocked[row] |= spec.to_dense(length)
    if np.any(blocked.all(axis=-1)):
        msg = 'mask leaves a query position with no key to attend to'
        raise ValueError(msg)
    return np.where(blocked, MASK_VALUE, 0.0)


def _layer_names(index: int) -> tuple[str, ...]:
    return tuple(f'l{index}.{name}' for name in ('wq', 'wk', 'wv', 'wo', 'w1', 'b1', 'w2', 'b2'))


def parameter_shapes(config: PolicyConfig) -> dict[str, tuple[int, ...]]:
    d, f, vocab = config.d_model, config.d_ff, config.vocab
    shapes: dict[str, tuple[int, ...]] = {'tok_emb': (vocab, d), 'pos_emb': (config.max_len, d)}
    for i in range(config.n_layers):
        wq, wk, wv, wo, w1, b1, w2, b2 = _layer_names(i)
        shapes.update({wq: (d, d), wk: (d, d), wv: (d, d), wo: (d, d), w1: (d, f), b1: (f,), w2: (f, d), b2: (d,)})
    shapes.update({'head_w': (d, vocab), 'head_b': (vocab,)})
    return shapes


@dataclass
class PolicyParams:
    """Ordered mapping of parameter name to float64 array."""

    config: PolicyConfig
    tensors: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: PolicyConfig, rng: np.random.Generator) -> 'PolicyParams':
        """Gaussian weights with std ``config.init_std`` and zero biases."""
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(('b1', 'b2', 'head_b')):
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = rng.normal(0.0, config.init_std, size=shape)
        return cls(config=config, tensors=tensors)

    @classmethod
    def zeros(cls, config: PolicyConfig) -> 'PolicyParams':
        return cls(config=config, tensors={name: np.zeros(shape) for name, shape in parameter_shapes(config).items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self.tensors.items()

    @property
    def num_parameters(self) -> int:
        return int(sum(array.size for array in self.tensors.values()))

    def copy(self) -> 'PolicyParams':
        return PolicyParams(config=self.config, tensors={name: array.copy() for name, array in self.tensors.items()})

    def zeros_like(self) -> 'PolicyParams':
        return PolicyParams(config=self.config, tensors={name: np.zeros_like(a) for name, a in self.tensors.items()})

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(array * array)) for array in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(array)) for array in self.tensors.values())

    def equals(self, other: 'PolicyParams') -> bool:
        """Bit-for-bit equality of every tensor."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(np.array_equal(self[name], other[name]) for name in self.tensors)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


@dataclass
class _LayerCache:
    h_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attention: np.ndarray
    context: np.ndarray
    h_mid: np.ndarray
    pre_act: np.ndarray
    act: np.ndarray


@dataclass
class ForwardResult:
    """Logits for every position plus what the reverse pass needs."""

    tokens: np.ndarray
    logits: np.ndarray
    hidden: np.ndarray
    layers: list[_LayerCache]

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @property
    def attention(self) -> list[np.ndarray]:
        """Attention weights per layer, each (batch, length, length)."""
        return [layer.attention for layer in self.layers]

    def distribution(self, row: int, position: int) -> ProbabilityVector:
        return ProbabilityVector.from_logits(self.logits[row, position])


def forward(
    params: PolicyParams,
    tokens: np.ndarray,
    mask: MaskLike = None,
    embed_offset: np.ndarray | None = None,
) -> ForwardResult:
    """Run the policy on (batch, length) token ids.

    Args:
        params: Policy parameters.
        tokens: Token ids, shape (length,) or (batch, length).
        mask: Extra blocked pairs: one spec for every row, one spec per row,
            or a boolean (batch, length, length) array.
        embed_offset: Optional additive perturbation of the input embeddings,
            broadcastable to (batch, length, d_model).

    Returns:
        Logits at every position (the next-token law after that position)
        and the activation cache.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    batch, length = tokens.shape
    config = params.config
    if length > config.max_len:
        msg = f'sequence length {length} exceeds max_len {config.max_len}'
        raise LengthExceeded(msg)
    mask_add = additive_mask(mask, batch, length)
    scale = 1.0 / math.sqrt(config.d_model)

    h = params['tok_emb'][tokens] + params['pos_emb'][:length][None]
    if embed_offset is not None:
        h = h + embed_offset
    layers: list[_LayerCache] = []
    for i in range(config.n_layers):
        wq, wk, wv, wo, w1, b1, w2, b2 = (params[name] for name in _layer_names(i))
        q, k, v = h @ wq, h @ wk, h @ wv
        scores = (q @ k.transpose(0, 2, 1)) * scale + mask_add
        attention = softmax(scores, axis=-1)
        context = attention @ v
        h_mid = h + context @ wo
        pre_act = h_mid @ w1 + b1
        act = _gelu(pre_act)
        layers.append(_LayerCache(h, q, k, v, attention, context, h_mid, pre_act, act))
        h = h_mid + act @ w2 + b2
    logits = h @ params['head_w'] + params['head_b']
    return ForwardResult(tokens=tokens, logits=logits, hidden=h, layers=layers)


def backward(params: PolicyParams, result: ForwardResult, dlogits: np.ndarray) -> PolicyParams:
    """Gradient of a scalar loss whose logit gradient is ``dlogits``."""
    config = params.config
    grads = params.zeros_like()
    scale = 1.0 / math.sqrt(config.d_model)
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(result.logits.shape)

    grads['head_w'][...] = np.einsum('bld,blv->dv', result.hidden, dlogits)
    grads['head_b'][...] = dlogits.sum(axis=(0, 1))
    dh = dlogits @ params['head_w'].T

    for i in reversed(range(config.n_layers)):
        cache = result.layers[i]
        wq, wk, wv, wo, w1, b1, w2, b2 = _layer_names(i)

        grads[w2][...] = np.einsum('blf,bld->fd', cache.act, dh)
        grads[b2][...] = dh.sum(axis=(0, 1))
        d_pre = (dh @ params[w2].T) * _gelu_grad(cache.pre_act)
        grads[w1][...] = np.einsum('bld,blf->df', cache.h_mid, d_pre)
        grads[b1][...] = d_pre.sum(axis=(0, 1))
        d_mid = dh + d_pre @ params[w1].T

        grads[wo][...] = np.einsum('bld,ble->de', cache.context, d_mid)
        d_context = d_mid @ params[wo].T
        d_attention = d_context @ cache.v.transpose(0, 2, 1)
        d_v = cache.attention.transpose(0, 2, 1) @ d_context
        d_scores = cache.attention * (d_attention - (d_attention * cache.attention).sum(axis=-1, keepdims=True))
        d_scores *= scale
        d_q = d_scores @ cache.k
        d_k = d_scores.transpose(0, 2, 1) @ cache.q

        grads[wq][...] = np.einsum('bld,ble->de', cache.h_in, d_q)
        grads[wk][...] = np.einsum('bld,ble->de', cache.h_in, d_k)
        grads[wv][...] = np.einsum('bld,ble->de', cache.h_in, d_v)
        dh = d_mid + d_q @ params[wq].T + d_k @ params[wk].T + d_v @ params[wv].T

    length = result.tokens.shape[1]
    np.add.at(grads['tok_emb'], result.tokens, dh)
    grads['pos_emb'][:length] = dh.sum(axis=0)
    return grads


LossFn = Callable[[ForwardResult], tuple[float, np.ndarray]]


def value_and_grad(
    params: PolicyParams,
    tokens: np.ndarray,
    loss_fn: LossFn,
    mask: MaskLike = None,
) -> tuple[float, PolicyParams]:
    """Evaluate ``loss_fn`` on a forward pass and backpropagate it.

    ``loss_fn`` returns the scalar and its gradient with respect to the
    logits; anything it closes over is a constant of differentiation.
    """
    result = forward(params, tokens, mask)
    value, dlogits = loss_fn(result)
    if not math.isfinite(value):
        msg = f'loss evaluated to {value}'
        raise NonFiniteLoss(msg)
    grads = backward(params, result, dlogits)
    if not grads.all_finite():
        msg = 'gradient contains non-finite entries'
        raise NonFiniteLoss(msg)
    return float(value), grads


def sample_token(
    dist: ProbabilityVector | np.ndarray,
    rng: np.random.Generator,
    temperature: float = 1.0,
    *,
    greedy: bool = False,
) -> int:
    """Temperature-scaled categorical draw; greedy picks the lowest argmax."""
    probs = dist.probs if isinstance(dist, ProbabilityVector) else np.asarray(dist, dtype=np.float64)
    if greedy:
        return int(np.argmax(probs))
    if temperature <= 0.0:
        msg = f'temperature must be positive, got {temperature}'
        raise ValueError(msg)
    if temperature != 1.0:
        with np.errstate(divide='ignore'):
            scaled = np.log(probs) / temperature
        probs = softmax(scaled)
    return int(rng.choice(probs.size, p=probs / probs.sum()))


__all__ = [
    'MASK_VALUE',
    'NO_MASK',
    'AttentionMaskSpec',
    'ForwardResult',
    'LossFn',
    'PolicyParams',
    'additive_mask',
    'backward',
    'forward',
    'parameter_shapes',
    'sample_token',
    'value_and_grad',
]
