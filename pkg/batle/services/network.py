"""
Multi-head feedforward network in numpy with hand-written backpropagation.

    x -> f (shared, ELU + dropout) -> z
    z -> g          -> sigmoid            propensity P(T=1|x)
    z -> q0, q1     -> (mu_t, softplus+floor) Gaussian outcome heads
    z -> d          -> sigmoid            domain probability P(D=1|x)
    z -> r          -> linear             reconstruction of x

Head hidden layers use ELU and dropout; the decoder uses ELU without dropout.
Dropout is inverted (kept units scaled by 1/(1-p)). ELU with alpha=1 is
continuously differentiable, which keeps finite-difference checks reliable.

Weights are stored as ``{block}.{layer}.weight`` (fan_in x fan_out) and
``{block}.{layer}.bias``.
"""
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from batle.config import NetworkConfig
from batle.errors import DataFormatError, NonFiniteActivationError, ShapeError
from batle.services.numeric import RngStream

logger = logging.getLogger(__name__)

BLOCK_ORDER = ("shared", "propensity", "outcome0", "outcome1", "discriminator", "decoder")
CHECKPOINT_FORMAT = "batle-checkpoint"
CHECKPOINT_VERSION = 1

Masks = Dict[str, np.ndarray]


def block_layout(config: NetworkConfig) -> Dict[str, List[Tuple[int, int]]]:
    """(fan_in, fan_out) per layer for every enabled block, in ``BLOCK_ORDER``."""
    def chain(widths: List[int]) -> List[Tuple[int, int]]:
        return list(zip(widths[:-1], widths[1:]))

    shared = list(config.shared_layer_widths)
    heads = list(config.head_layer_widths)
    width = shared[-1]
    outcome_width = 1 if config.point_outcomes else 2

    layout = {
        "shared": chain([config.input_dim] + shared),
        "propensity": chain([width] + heads + [1]),
        "outcome0": chain([width] + heads + [outcome_width]),
        "outcome1": chain([width] + heads + [outcome_width]),
    }
    if config.discriminator_enabled:
        layout["discriminator"] = chain([width] + heads + [1])
    if config.reconstruction_enabled:
        layout["decoder"] = chain([width] + shared[-2::-1] + [config.input_dim])
    return layout


def _is_hidden(block: str, index: int, n_layers: int) -> bool:
    return block == "shared" or index < n_layers - 1


def _has_dropout(block: str, index: int, n_layers: int) -> bool:
    return block != "decoder" and _is_hidden(block, index, n_layers)


class Parameters:
    """Named weight arrays of one network; gradients use the same container."""

    def __init__(self, config: NetworkConfig, arrays: Dict[str, np.ndarray]):
        self.config = config
        self.arrays = dict(arrays)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def __setitem__(self, key: str, value: np.ndarray) -> None:
        self.arrays[key] = value

    def __contains__(self, key: str) -> bool:
        return key in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def blocks(self) -> List[str]:
        return [b for b in BLOCK_ORDER if f"{b}.0.weight" in self.arrays]

    def has_block(self, block: str) -> bool:
        return f"{block}.0.weight" in self.arrays

    def block_keys(self, block: str) -> List[str]:
        prefix = f"{block}."
        return [k for k in self.arrays if k.startswith(prefix)]

    def n_layers(self, block: str) -> int:
        return len(self.block_keys(block)) // 2

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "Parameters":
        return Parameters(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def equals(self, other: "Parameters") -> bool:
        """Bitwise equality of every array."""
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()
        )


Gradients = Parameters


def init_params(config: NetworkConfig, rng: RngStream) -> Parameters:
    """
    He-normal weights (sd = sqrt(2 / fan_in)), zero biases.

    Each block draws from its own child stream, so toggling the transfer heads
    never changes the weights of the other blocks.
    """
    arrays = {}
    layout = block_layout(config)
    for block_id, block in enumerate(BLOCK_ORDER):
        if block not in layout:
            continue
        generator = rng.child(block_id).generator
        for i, (fan_in, fan_out) in enumerate(layout[block]):
            arrays[f"{block}.{i}.weight"] = generator.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            arrays[f"{block}.{i}.bias"] = np.zeros(fan_out)
    return Parameters(config, arrays)


@dataclass
class ForwardOutput:
    representation: np.ndarray
    propensity: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    sigma0: Optional[np.ndarray] = None
    sigma1: Optional[np.ndarray] = None
    disc_prob: Optional[np.ndarray] = None
    reconstruction: Optional[np.ndarray] = None
    masks: Masks = field(default_factory=dict)

    def mu(self, t: int) -> np.ndarray:
        return self.mu1 if t == 1 else self.mu0

    def sigma(self, t: int) -> Optional[np.ndarray]:
        return self.sigma1 if t == 1 else self.sigma0


@dataclass
class HeadGradients:
    """Loss gradients with respect to the network's reported outputs."""

    propensity: Optional[np.ndarray] = None
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None
    sigma0: Optional[np.ndarray] = None
    sigma1: Optional[np.ndarray] = None
    disc_prob: Optional[np.ndarray] = None
    reconstruction: Optional[np.ndarray] = None

    def __add__(self, other: "HeadGradients") -> "HeadGradients":
        merged = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            merged[f.name] = a if b is None else b if a is None else a + b
        return HeadGradients(**merged)

    def scaled(self, factor: float) -> "HeadGradients":
        return HeadGradients(
            **{f.name: None if getattr(self, f.name) is None else factor * getattr(self, f.name) for f in fields(self)}
        )


@dataclass
class _LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    mask: Optional[np.ndarray]
    hidden: bool


@dataclass
class _ForwardCache:
    layers: Dict[str, List[_LayerCache]]
    raw: Dict[str, np.ndarray]


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _check_batch(params: Parameters, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.config.input_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match input_dim={params.config.input_dim}")
    return batch


def _run_block(
    params: Parameters,
    block: str,
    inputs: np.ndarray,
    rng: Optional[np.random.Generator],
    masks: Optional[Masks],
    used_masks: Masks,
    cache: _ForwardCache,
) -> np.ndarray:
    rate = params.config.dropout_rate
    n_layers = params.n_layers(block)
    records = []
    activation = inputs
    for i in range(n_layers):
        name = f"{block}.{i}"
        pre = activation @ params[f"{name}.weight"] + params[f"{name}.bias"]
        hidden = _is_hidden(block, i, n_layers)
        mask = None
        out = elu(pre) if hidden else pre
        if _has_dropout(block, i, n_layers):
            if masks is not None:
                if name not in masks or masks[name].shape != out.shape:
                    raise ShapeError(f"missing or mis-shaped dropout mask for layer {name}")
                mask = masks[name]
            elif rng is not None:
                mask = (rng.random(out.shape) >= rate) / (1.0 - rate)
            if mask is not None:
                out = out * mask
                used_masks[name] = mask
        if not np.all(np.isfinite(out)):
            raise NonFiniteActivationError(name)
        records.append(_LayerCache(inputs=activation, pre=pre, mask=mask, hidden=hidden))
        activation = out
    cache.layers[block] = records
    cache.raw[block] = activation
    return activation


def forward_with_cache(
    params: Parameters,
    batch: np.ndarray,
    rng: Optional[RngStream] = None,
    masks: Optional[Masks] = None,
) -> Tuple[ForwardOutput, _ForwardCache]:
    """``forward`` that also returns the activation cache ``backward`` can reuse."""
    batch = _check_batch(params, batch)
    # an empty mask set (from a dropout-off pass) replays as dropout off
    masks = masks or None
    generator = None if masks is not None or rng is None else rng.generator
    cache = _ForwardCache(layers={}, raw={})
    used: Masks = {}

    z = _run_block(params, "shared", batch, generator, masks, used, cache)
    heads = {b: _run_block(params, b, z, generator, masks, used, cache) for b in BLOCK_ORDER[1:] if params.has_block(b)}

    floor = params.config.sigma_floor
    point = params.config.point_outcomes
    output = ForwardOutput(
        representation=z,
        propensity=expit(heads["propensity"][:, 0]),
        mu0=heads["outcome0"][:, 0],
        mu1=heads["outcome1"][:, 0],
        sigma0=None if point else softplus(heads["outcome0"][:, 1]) + floor,
        sigma1=None if point else softplus(heads["outcome1"][:, 1]) + floor,
        disc_prob=expit(heads["discriminator"][:, 0]) if "discriminator" in heads else None,
        reconstruction=heads.get("decoder"),
        masks=used,
    )
    return output, cache


def forward(
    params: Parameters,
    batch: np.ndarray,
    rng: Optional[RngStream] = None,
    masks: Optional[Masks] = None,
) -> ForwardOutput:
    """
    Evaluate every enabled head on ``batch``.

    Dropout mode: ``masks`` given -> replay those masks; else ``rng`` given ->
    sample fresh masks (returned in ``output.masks``); else dropout off.
    """
    output, _ = forward_with_cache(params, batch, rng=rng, masks=masks)
    return output


def _check_upstream(value: Optional[np.ndarray], rows: int, name: str, width: Optional[int] = None) -> None:
    if value is None:
        return
    expected = (rows,) if width is None else (rows, width)
    if value.shape != expected:
        raise ShapeError(f"upstream gradient {name} has shape {value.shape}, expected {expected}")


def _output_gradients(
    params: Parameters, cache: _ForwardCache, upstream: HeadGradients, rows: int
) -> Dict[str, np.ndarray]:
    """Chain the reported-output gradients through the link functions."""
    config = params.config
    _check_upstream(upstream.propensity, rows, "propensity")
    _check_upstream(upstream.disc_prob, rows, "disc_prob")
    _check_upstream(upstream.reconstruction, rows, "reconstruction", config.input_dim)
    grads = {}

    if upstream.propensity is not None:
        p = expit(cache.raw["propensity"][:, 0])
        grads["propensity"] = (upstream.propensity * p * (1.0 - p))[:, None]

    for t in (0, 1):
        d_mu = getattr(upstream, f"mu{t}")
        d_sigma = None if config.point_outcomes else getattr(upstream, f"sigma{t}")
        _check_upstream(d_mu, rows, f"mu{t}")
        _check_upstream(d_sigma, rows, f"sigma{t}")
        if d_mu is None and d_sigma is None:
            continue
        raw = cache.raw[f"outcome{t}"]
        d_out = np.zeros_like(raw)
        if d_mu is not None:
            d_out[:, 0] = d_mu
        if d_sigma is not None:
            d_out[:, 1] = d_sigma * expit(raw[:, 1])
        grads[f"outcome{t}"] = d_out

    if upstream.disc_prob is not None and "discriminator" in cache.raw:
        q = expit(cache.raw["discriminator"][:, 0])
        grads["discriminator"] = (upstream.disc_prob * q * (1.0 - q))[:, None]

    if upstream.reconstruction is not None and "decoder" in cache.raw:
        grads["decoder"] = upstream.reconstruction

    return grads


def _backprop_block(
    params: Parameters, block: str, cache: _ForwardCache, d_out: np.ndarray, grads: Gradients, need_input: bool
) -> Optional[np.ndarray]:
    grad = d_out
    records = cache.layers[block]
    for i in reversed(range(len(records))):
        record = records[i]
        if record.hidden:
            if record.mask is not None:
                grad = grad * record.mask
            grad = grad * elu_grad(record.pre)
        weight = f"{block}.{i}.weight"
        grads[weight] = record.inputs.T @ grad
        grads[f"{block}.{i}.bias"] = grad.sum(axis=0)
        if i > 0 or need_input:
            grad = grad @ params[weight].T
    return grad if need_input else None


def backward(
    params: Parameters,
    batch: np.ndarray,
    upstream: HeadGradients,
    masks: Optional[Masks] = None,
    blocks: Optional[Iterable[str]] = None,
    into_shared: bool = True,
    cache: Optional[_ForwardCache] = None,
) -> Gradients:
    """
    Exact gradients of a loss whose derivatives with respect to the reported
    outputs are ``upstream``.

    The forward pass is replayed with ``masks`` (dropout off when None).
    ``blocks`` restricts which head blocks receive gradients; with
    ``into_shared=False`` nothing is propagated into the representation.
    Gradients of blocks that were not reached are zero.
    """
    batch = _check_batch(params, batch)
    if cache is None:
        _, cache = forward_with_cache(params, batch, masks=masks)
    rows = batch.shape[0]
    selected = set(BLOCK_ORDER if blocks is None else blocks)

    grads = params.zeros_like()
    d_representation = np.zeros_like(cache.raw["shared"])
    for block, d_out in _output_gradients(params, cache, upstream, rows).items():
        if block not in selected or not params.has_block(block):
            continue
        d_input = _backprop_block(params, block, cache, d_out, grads, need_input=into_shared)
        if d_input is not None:
            d_representation += d_input
    if into_shared and "shared" in selected:
        _backprop_block(params, "shared", cache, d_representation, grads, need_input=False)
    return grads


def save_checkpoint(path: Union[str, Path], params: Parameters) -> Path:
    """JSON checkpoint: config plus every array as shape + flat float list (exact round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.model_dump(),
        "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.items()},
    }
    path.write_text(json.dumps(payload))
    logger.info("Saved checkpoint with %d arrays to %s", len(params.arrays), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Parameters:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"checkpoint not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not a JSON checkpoint ({e})") from e
    if not isinstance(payload, dict):
        raise DataFormatError(f"{path}: checkpoint must be a JSON object")
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
            f"found {payload.get('format')} v{payload.get('version')}"
        )
    config = NetworkConfig(**payload["config"])
    arrays = {
        k: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"]) for k, entry in payload["arrays"].items()
    }
    params = Parameters(config, arrays)
    expected = {
        f"{block}.{i}.{kind}": (fan_in, fan_out) if kind == "weight" else (fan_out,)
        for block, layers in block_layout(config).items()
        for i, (fan_in, fan_out) in enumerate(layers)
        for kind in ("weight", "bias")
    }
    if set(expected) != set(arrays) or any(arrays[k].shape != shape for k, shape in expected.items()):
        raise DataFormatError(f"{path}: arrays do not match the stored network config")
    return params
