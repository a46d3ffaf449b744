"""Network specs, presets, construction, forward passes and CNN training."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .classifier import (Mlp, Sgd, TrainConfig, TrainHistory, check_labels, loss_and_grads,
                         mlp_forward, read_mlp, write_mlp)
from .clustering import DEFAULT_N_PATCHES, learn_layer_filters
from .errors import ConfigurationError, FormatError, UnsupportedOperationError
from .layers import (DEFAULT_EPSILON, ConnectionTable, FilterBank, LayerParams, apply_filter,
                     cl_layer_forward, cnn_layer_backward, cnn_layer_forward, layer_backward,
                     read_bank, spatial_convolution, write_bank)
from .tensor import make_gaussian_kernel, read_exact

log = logging.getLogger(__name__)

NETWORK_MAGIC = b"CLN1"
LAYER_KINDS = ("cl", "cnn")


def derive_seed(root: int, *keys: int) -> int:
    """Independent 32-bit seed for a sub-task, fully determined by the root seed."""
    return int(np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1)[0])


# -- specs ----------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int
    size: int
    pool: int = 2
    norm: int = 9
    fan_in: int | None = None  # None means a full table
    op: str | None = None  # "sad" or "conv"; defaults by kind

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.op is None:
            object.__setattr__(self, "op", "sad" if self.kind == "cl" else "conv")
        if self.op not in ("sad", "conv"):
            raise ConfigurationError(f"filter op must be sad or conv, got {self.op!r}")
        if self.kind == "cnn" and self.op != "conv":
            raise ConfigurationError("CNN layers always use convolution")
        if self.filters < 1 or self.size < 1 or self.pool < 1 or self.norm < 1 or self.norm % 2 == 0:
            raise ConfigurationError("filters, size and pool must be positive and norm a positive odd size")


@dataclass(frozen=True)
class ProjectionSpec:
    """Linear filter covering the whole remaining map, collapsing it to one value per output."""

    filters: int
    fan_in: int | None = None


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    projection: ProjectionSpec | None = None
    classes: int = 0
    hidden: int = 128
    pool_mode: str = "literal"
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input shape must be three positive sizes, got {self.input_shape}")
        if self.classes < 0 or self.hidden < 1:
            raise ConfigurationError("classes must be >= 0 and hidden >= 1")
        if self.pool_mode not in ("literal", "true_l2"):
            raise ConfigurationError(f"pool_mode must be literal or true_l2, got {self.pool_mode!r}")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.projection is not None and self.projection.filters < 1:
            raise ConfigurationError("projection needs at least one filter")

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Closed-form output shape of every stage, validating the chain."""
        planes, rows, cols = self.input_shape
        shapes = []
        for idx, layer in enumerate(self.layers, start=1):
            if layer.fan_in is not None and not 1 <= layer.fan_in <= planes:
                raise ConfigurationError(f"layer {idx}: fan-in {layer.fan_in} exceeds {planes} input planes")
            r, c = rows - layer.size + 1, cols - layer.size + 1
            if r < 1 or c < 1:
                raise ConfigurationError(f"layer {idx}: {layer.size}x{layer.size} filter does not fit {rows}x{cols} input")
            if r % layer.pool or c % layer.pool:
                raise ConfigurationError(f"layer {idx}: {r}x{c} filter output not divisible by pool {layer.pool}")
            planes, rows, cols = layer.filters, r // layer.pool, c // layer.pool
            shapes.append((planes, rows, cols))
        if self.projection is not None:
            fan = self.projection.fan_in
            if fan is not None and not 1 <= fan <= planes:
                raise ConfigurationError(f"projection: fan-in {fan} exceeds {planes} input planes")
            planes, rows, cols = self.projection.filters, 1, 1
            shapes.append((planes, rows, cols))
        return shapes

    @property
    def feature_dim(self) -> int:
        p, r, c = self.layer_shapes()[-1] if (self.layers or self.projection) else self.input_shape
        return p * r * c

    def with_layers(self, n: int) -> "NetworkSpec":
        return replace(self, layers=self.layers[:n], name=f"{self.name}-{n}l" if n < len(self.layers) else self.name)


def _cl(filters, size, fan_in=None, op="sad"):
    return LayerSpec("cl", filters, size, fan_in=fan_in, op=op)


def _cnn(filters, size, fan_in=None):
    return LayerSpec("cnn", filters, size, fan_in=fan_in)


PRESETS: dict[str, NetworkSpec] = {
    "svhn-cl": NetworkSpec("svhn-cl", (3, 32, 32), (_cl(16, 5), _cl(128, 5)), classes=10),
    "svhn-cnn": NetworkSpec("svhn-cnn", (3, 32, 32), (_cnn(16, 5, 1), _cnn(128, 5, 4)), classes=10),
    "cifar-cl": NetworkSpec("cifar-cl", (3, 32, 32), (_cl(16, 5), _cl(128, 3)), classes=10),
    "cifar-cnn": NetworkSpec("cifar-cnn", (3, 32, 32), (_cnn(16, 5, 1), _cnn(128, 3, 4)), classes=10),
    "bars-cl": NetworkSpec("bars-cl", (1, 24, 24), (_cl(8, 5), _cl(32, 3)), classes=10),
    "bars-cnn": NetworkSpec("bars-cnn", (1, 24, 24), (_cnn(8, 5), _cnn(32, 3, 4)), classes=10),
    "realtime-46": NetworkSpec("realtime-46", (1, 46, 46), (_cl(16, 7), _cl(128, 7, 8)),
                               projection=ProjectionSpec(128, 64)),
    "realtime-46-cnn": NetworkSpec("realtime-46-cnn", (1, 46, 46), (_cnn(16, 7), _cnn(128, 7, 8)),
                                   projection=ProjectionSpec(128, 64)),
}
for _name in ("svhn-cl", "svhn-cnn", "cifar-cl", "cifar-cnn", "bars-cl", "bars-cnn"):
    PRESETS[f"{_name}-1l"] = PRESETS[_name].with_layers(1)


def preset(name: str, **overrides) -> NetworkSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
    return replace(spec, **overrides) if overrides else spec


# -- canonical text ----------------------------------------------------------------

def spec_to_text(spec: NetworkSpec) -> str:
    lines = [
        ("name", spec.name),
        ("input", "x".join(map(str, spec.input_shape))),
        ("classes", spec.classes),
        ("hidden", spec.hidden),
        ("pool_mode", spec.pool_mode),
        ("epsilon", repr(float(spec.epsilon))),
        ("seed", spec.seed),
        ("layers", len(spec.layers)),
    ]
    for i, layer in enumerate(spec.layers, start=1):
        lines += [
            (f"layer{i}.kind", layer.kind),
            (f"layer{i}.op", layer.op),
            (f"layer{i}.filters", layer.filters),
            (f"layer{i}.size", layer.size),
            (f"layer{i}.pool", layer.pool),
            (f"layer{i}.norm", layer.norm),
            (f"layer{i}.fan_in", "full" if layer.fan_in is None else layer.fan_in),
        ]
    if spec.projection is None:
        lines.append(("projection", "none"))
    else:
        lines += [("projection", "linear"),
                  ("projection.filters", spec.projection.filters),
                  ("projection.fan_in", "full" if spec.projection.fan_in is None else spec.projection.fan_in)]
    return "".join(f"{k} = {v}\n" for k, v in lines)


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _fan(value: str) -> int | None:
    return None if value == "full" else int(value)


def spec_from_text(text: str) -> NetworkSpec:
    kv = parse_key_values(text)
    try:
        layers = []
        for i in range(1, int(kv["layers"]) + 1):
            layers.append(LayerSpec(kv[f"layer{i}.kind"], int(kv[f"layer{i}.filters"]), int(kv[f"layer{i}.size"]),
                                    int(kv[f"layer{i}.pool"]), int(kv[f"layer{i}.norm"]),
                                    _fan(kv[f"layer{i}.fan_in"]), kv[f"layer{i}.op"]))
        projection = None
        if kv.get("projection", "none") != "none":
            projection = ProjectionSpec(int(kv["projection.filters"]), _fan(kv["projection.fan_in"]))
        spec = NetworkSpec(kv["name"], tuple(int(s) for s in kv["input"].split("x")), tuple(layers),
                           projection, int(kv["classes"]), int(kv["hidden"]), kv["pool_mode"],
                           float(kv["epsilon"]), int(kv["seed"]))
    except KeyError as exc:
        raise ConfigurationError(f"network spec is missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigurationError(f"bad value in network spec: {exc}") from None
    spec.layer_shapes()
    return spec


# -- tables and random banks ---------------------------------------------------------

def full_connection_table(in_planes: int, out_planes: int) -> ConnectionTable:
    return ConnectionTable(in_planes, tuple(tuple(range(in_planes)) for _ in range(out_planes)))


def random_connection_table(in_planes: int, out_planes: int, fan_in: int, seed: int,
                            max_attempts: int = 1000) -> ConnectionTable:
    """Each row holds ``fan_in`` distinct inputs drawn uniformly.

    When ``out_planes * fan_in >= in_planes`` tables that leave an input unread
    are redrawn; after ``max_attempts`` failures the rows are dealt from
    shuffled copies of the input list instead.
    """
    if not 1 <= fan_in <= in_planes:
        raise ValueError(f"fan-in must be in 1..{in_planes}, got {fan_in}")
    rng = np.random.default_rng(seed)
    need_cover = out_planes * fan_in >= in_planes
    for _ in range(max_attempts):
        rows = [np.sort(rng.choice(in_planes, fan_in, replace=False)) for _ in range(out_planes)]
        if not need_cover or len(set(np.concatenate(rows).tolist())) == in_planes:
            return ConnectionTable(in_planes, tuple(tuple(r.tolist()) for r in rows))
    rows = []
    pool: list[int] = []
    for _ in range(out_planes):
        row: list[int] = []
        while len(row) < fan_in:
            if not pool:
                pool = rng.permutation(in_planes).tolist()
            cand = pool.pop()
            if cand not in row:
                row.append(cand)
        rows.append(tuple(sorted(row)))
    return ConnectionTable(in_planes, tuple(rows))


def random_filter_bank(shape: tuple[int, int, int, int], table: ConnectionTable | None = None,
                       seed: int = 0, bias: bool = True) -> FilterBank:
    """Weights uniform in +-(fan_in * h * w)**-0.5 per output plane; zero bias."""
    out_planes, in_planes, h, w = shape
    if table is None:
        table = full_connection_table(in_planes, out_planes)
    if (table.out_planes, table.in_planes) != (out_planes, in_planes):
        raise ValueError(f"table is {table.out_planes}x{table.in_planes}, shape asks for {out_planes}x{in_planes}")
    rng = np.random.default_rng(seed)
    weights = np.zeros(shape)
    for j, row in enumerate(table.rows):
        bound = (len(row) * h * w) ** -0.5
        weights[j, list(row)] = rng.uniform(-bound, bound, (len(row), h, w))
    return FilterBank(weights, table, np.zeros(out_planes) if bias else None)


# -- networks -------------------------------------------------------------------

@dataclass(eq=False)
class Network:
    spec: NetworkSpec
    banks: list[FilterBank]
    projection: FilterBank | None = None
    classifier: Mlp | None = None
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._params_cache: dict[int, LayerParams] = {}

    def layer_params(self, idx: int) -> LayerParams:
        if idx not in self._params_cache:
            layer = self.spec.layers[idx]
            k = make_gaussian_kernel(layer.norm)
            self._params_cache[idx] = LayerParams(self.banks[idx], layer.pool, None, self.spec.pool_mode,
                                                  k, k, self.spec.epsilon, layer.op)
        return self._params_cache[idx]

    def trainable_params(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for bank in self.banks:
            params += [bank.weights, bank.bias]
        if self.projection is not None:
            params += [self.projection.weights, self.projection.bias]
        if self.classifier is not None:
            params += self.classifier.params()
        return params


def _table_for(fan_in: int | None, in_planes: int, out_planes: int, seed: int) -> ConnectionTable:
    if fan_in is None:
        return full_connection_table(in_planes, out_planes)
    return random_connection_table(in_planes, out_planes, fan_in, seed)


def _check_bank(where: str, bank: FilterBank, out_planes: int, in_planes: int, size: int,
                fan_in: int | None) -> None:
    expected = (out_planes, in_planes, size, size)
    if bank.weights.shape != expected:
        raise ConfigurationError(f"{where}: bank shape {bank.weights.shape} does not match spec {expected}")
    if fan_in is None and not bank.table.is_full:
        raise ConfigurationError(f"{where}: spec asks for a full table")
    if fan_in is not None and any(len(r) != fan_in for r in bank.table.rows):
        raise ConfigurationError(f"{where}: spec asks for fan-in {fan_in}")


def build_network(spec: NetworkSpec, sources: Sequence | None = None, *,
                  projection: FilterBank | None = None, classifier: Mlp | None = None,
                  provenance: dict[str, str] | None = None) -> Network:
    """Assemble a network; each layer source is a FilterBank, ``"random"`` or ``"train"``.

    Random and to-be-trained layers get seeded random tables and weights.
    The projection stage, when the spec has one, is random unless supplied.
    The classifier input size comes from a dry run of the feature layers.
    """
    shapes = spec.layer_shapes()
    sources = list(sources) if sources is not None else ["random"] * len(spec.layers)
    if len(sources) != len(spec.layers):
        raise ConfigurationError(f"{len(sources)} layer sources for {len(spec.layers)} layers")
    prov = dict(provenance or {})
    banks = []
    in_planes = spec.input_shape[0]
    for idx, (layer, src) in enumerate(zip(spec.layers, sources)):
        key = f"layer{idx + 1}"
        if isinstance(src, FilterBank):
            _check_bank(key, src, layer.filters, in_planes, layer.size, layer.fan_in)
            if layer.kind == "cnn" and src.bias is None:
                src = src.with_weights(src.weights, np.zeros(src.out_planes))
            banks.append(src)
            prov.setdefault(key, "supplied")
        elif src in ("random", "train"):
            seed = derive_seed(spec.seed, 1, idx)
            table = _table_for(layer.fan_in, in_planes, layer.filters, derive_seed(seed, 0))
            banks.append(random_filter_bank((layer.filters, in_planes, layer.size, layer.size), table,
                                            derive_seed(seed, 1)))
            prov.setdefault(key, f"{'random' if src == 'random' else 'trained'} seed={seed}")
        else:
            raise ConfigurationError(f"{key}: unknown filter source {src!r}")
        in_planes = layer.filters

    proj = None
    if spec.projection is not None:
        planes, rows, cols = shapes[-2] if spec.layers else spec.input_shape
        if rows != cols:
            raise ConfigurationError(f"projection needs a square map, got {rows}x{cols}")
        if projection is not None:
            _check_bank("projection", projection, spec.projection.filters, planes, rows, spec.projection.fan_in)
            proj = projection if projection.bias is not None else projection.with_weights(
                projection.weights, np.zeros(projection.out_planes))
            prov.setdefault("projection", "supplied")
        else:
            seed = derive_seed(spec.seed, 2)
            table = _table_for(spec.projection.fan_in, planes, spec.projection.filters, derive_seed(seed, 0))
            proj = random_filter_bank((spec.projection.filters, planes, rows, rows), table, derive_seed(seed, 1))
            prov.setdefault("projection", f"random seed={seed}")

    net = Network(spec, banks, proj, None, prov)
    dim = forward_features(net, np.zeros(spec.input_shape)).shape[-1]
    if dim != spec.feature_dim:
        raise ConfigurationError(f"dry run produced {dim} features, shape arithmetic says {spec.feature_dim}")
    if classifier is not None:
        if classifier.in_dim != dim or classifier.out_dim != spec.classes:
            raise ConfigurationError(f"classifier is {classifier.in_dim}->{classifier.out_dim}, "
                                     f"network needs {dim}->{spec.classes}")
        net.classifier = classifier
        prov.setdefault("classifier", "supplied")
    elif spec.classes > 0:
        seed = derive_seed(spec.seed, 3)
        net.classifier = Mlp.init(dim, spec.hidden, spec.classes, seed)
        prov.setdefault("classifier", f"random seed={seed}")
    return net


def _layer_forward(net: Network, idx: int, x: np.ndarray) -> np.ndarray:
    params = net.layer_params(idx)
    if net.spec.layers[idx].kind == "cl":
        return cl_layer_forward(x, params)
    return cnn_layer_forward(x, params)


def forward_maps(net: Network, images: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Output of the first ``upto`` feature layers (all by default), before projection."""
    x = np.asarray(images, dtype=np.float64)
    for idx in range(len(net.banks) if upto is None else upto):
        x = _layer_forward(net, idx, x)
    return x


def forward_features(net: Network, image: np.ndarray) -> np.ndarray:
    """Flattened final feature map; a batch of images gives one row per image."""
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if x.shape[-3:] != tuple(net.spec.input_shape) or x.ndim not in (3, 4):
        raise ValueError(f"input shape {x.shape} does not match network input {net.spec.input_shape}")
    y = forward_maps(net, x)
    if net.projection is not None:
        y = spatial_convolution(y, net.projection)
    if single:
        return y.reshape(-1)
    return y.reshape(y.shape[0], -1)


def batch_features(net: Network, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return np.zeros((0, net.spec.feature_dim))
    return np.concatenate([forward_features(net, images[s:s + chunk]) for s in range(0, len(images), chunk)])


def predict(net: Network, image: np.ndarray):
    """Class index (or one per image for a batch); ties go to the lowest index."""
    if net.classifier is None:
        raise ConfigurationError("network has no classifier")
    feats = forward_features(net, image)
    if feats.shape[-1] != net.classifier.in_dim:
        raise ConfigurationError(f"{feats.shape[-1]} features but classifier expects {net.classifier.in_dim}")
    scores = mlp_forward(net.classifier, feats)
    return np.argmax(scores, axis=-1) if scores.ndim > 1 else int(np.argmax(scores))


# -- clustering-learned networks --------------------------------------------------

def build_clustered_network(spec: NetworkSpec, images: np.ndarray, n_patches: int = DEFAULT_N_PATCHES,
                            *, normalize: bool = True, random_layers: Sequence[int] = (),
                            chunk: int = 256) -> Network:
    """Learn every feature layer in order by k-means on the previous layer's outputs.

    Layers listed in ``random_layers`` (0-based) get random filters instead.
    """
    if any(layer.kind != "cl" for layer in spec.layers):
        raise ConfigurationError("clustering learning applies to CL layers only")
    images = np.asarray(images, dtype=np.float64)
    spec.layer_shapes()
    banks: list[FilterBank] = []
    prov: dict[str, str] = {}
    data = images
    in_planes = spec.input_shape[0]
    for idx, layer in enumerate(spec.layers):
        seed = derive_seed(spec.seed, 1, idx)
        table = _table_for(layer.fan_in, in_planes, layer.filters, derive_seed(seed, 0))
        if idx in random_layers:
            bank = random_filter_bank((layer.filters, in_planes, layer.size, layer.size), table, derive_seed(seed, 1))
            prov[f"layer{idx + 1}"] = f"random seed={seed}"
        else:
            bank = learn_layer_filters(data, layer.filters, layer.size, layer.size, n_patches,
                                       derive_seed(seed, 1), normalize=normalize, table=table)
            prov[f"layer{idx + 1}"] = f"clustered seed={seed} patches={n_patches} normalize={int(normalize)}"
        banks.append(bank)
        if idx + 1 < len(spec.layers):
            partial = Network(replace(spec, layers=spec.layers[:idx + 1], projection=None, classes=0), banks[:])
            data = np.concatenate([_layer_forward(partial, idx, data[s:s + chunk])
                                   for s in range(0, len(data), chunk)])
        in_planes = layer.filters
    return build_network(spec, banks, provenance=prov)


# -- supervised CNN training ------------------------------------------------------

def network_loss_and_grads(net: Network, images: np.ndarray, labels: np.ndarray):
    """Mean NLL over a batch and gradients aligned with ``net.trainable_params()``."""
    if any(layer.kind != "cnn" for layer in net.spec.layers):
        raise UnsupportedOperationError("end-to-end gradients need CNN layers; SAD layers are not trainable")
    if net.classifier is None:
        raise ConfigurationError("network has no classifier")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    inputs = []
    for idx in range(len(net.banks)):
        inputs.append(x)
        x = _layer_forward(net, idx, x)
    proj_in = x
    if net.projection is not None:
        x = spatial_convolution(x, net.projection)
    feats = x.reshape(x.shape[0], -1)
    loss, mlp_grads, dfeat = loss_and_grads(net.classifier, feats, labels)
    g = dfeat.reshape(x.shape)
    grads_rev: list[np.ndarray] = []
    if net.projection is not None:
        g, pg = layer_backward("convolution", proj_in, g, net.projection)
        grads_rev += [pg["bias"], pg["weights"]]
    for idx in reversed(range(len(net.banks))):
        g, bg = cnn_layer_backward(inputs[idx], g, net.layer_params(idx))
        grads_rev += [bg["bias"], bg["weights"]]
    return loss, grads_rev[::-1] + mlp_grads


def train_cnn_supervised(spec: NetworkSpec, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                         on_epoch: Callable[[int, Network, float], None] | None = None
                         ) -> tuple[Network, TrainHistory]:
    """End-to-end minibatch SGD of a CNN-only network and its classifier."""
    if any(layer.kind != "cnn" for layer in spec.layers):
        raise UnsupportedOperationError("supervised training is defined for CNN layers only")
    if spec.classes < 1:
        raise ConfigurationError("spec has no classifier")
    images = np.asarray(images, dtype=np.float64)
    y = check_labels(labels, spec.classes)
    if len(images) == 0 or len(images) != len(y):
        raise ValueError("need a non-empty image set with one label per image")
    net = build_network(spec, ["train"] * len(spec.layers))
    if net.projection is not None:
        net.provenance["projection"] = net.provenance["projection"].replace("random", "trained", 1)
    net.provenance["classifier"] = f"trained seed={cfg.seed}"
    params = net.trainable_params()
    opt = Sgd(params, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    hist = TrainHistory()
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = network_loss_and_grads(net, images[idx], y[idx])
            opt.step(grads)
            total += loss * len(idx)
        hist.loss.append(total / n)
        acc = float(np.mean(predict(net, images) == y))
        hist.train_accuracy.append(acc)
        log.info("epoch %d loss %.4f train accuracy %.4f", epoch + 1, hist.loss[-1], acc)
        if on_epoch is not None:
            on_epoch(epoch, net, hist.loss[-1])
        if cfg.early_stop_accuracy is not None and acc >= cfg.early_stop_accuracy:
            break
    return net, hist


# -- serialization ------------------------------------------------------------------

def _provenance_keys(spec: NetworkSpec) -> list[str]:
    return [f"layer{i}" for i in range(1, len(spec.layers) + 1)] + ["projection", "classifier"]


def network_header_text(net: Network) -> str:
    text = spec_to_text(net.spec)
    for key in _provenance_keys(net.spec):
        if key in net.provenance:
            text += f"provenance.{key} = {net.provenance[key]}\n"
    return text


def write_network(fh: BinaryIO, net: Network) -> None:
    text = network_header_text(net).encode("utf-8")
    fh.write(NETWORK_MAGIC)
    fh.write(struct.pack("<I", len(text)))
    fh.write(text)
    fh.write(struct.pack("<I", len(net.banks)))
    for bank in net.banks:
        write_bank(fh, bank)
    fh.write(struct.pack("<B", net.projection is not None))
    if net.projection is not None:
        write_bank(fh, net.projection)
    fh.write(struct.pack("<B", net.classifier is not None))
    if net.classifier is not None:
        write_mlp(fh, net.classifier)


def read_network(fh: BinaryIO) -> Network:
    magic = read_exact(fh, 4, "network magic")
    if magic != NETWORK_MAGIC:
        raise FormatError(f"bad network magic {magic!r}, expected {NETWORK_MAGIC!r}")
    (length,) = struct.unpack("<I", read_exact(fh, 4, "spec length"))
    text = read_exact(fh, length, "spec text").decode("utf-8")
    spec = spec_from_text(text)
    prov = {k[len("provenance."):]: v for k, v in parse_key_values(text).items() if k.startswith("provenance.")}
    (count,) = struct.unpack("<I", read_exact(fh, 4, "bank count"))
    banks = [read_bank(fh) for _ in range(count)]
    projection = read_bank(fh) if read_exact(fh, 1, "projection flag")[0] else None
    classifier = read_mlp(fh) if read_exact(fh, 1, "classifier flag")[0] else None
    return build_network(spec, banks, projection=projection, classifier=classifier, provenance=prov)


def save_network(path, net: Network) -> None:
    buf = io.BytesIO()
    write_network(buf, net)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        net = read_network(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after network")
    return net
