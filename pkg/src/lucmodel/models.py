"""Geo-net, hybrid conv-net and CDAE-net: architectures, training and inference."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .features import Dataset, balanced_minibatch
from .nn import layers as L
from .nn.io import load_weights, save_weights, write_history
from .nn.losses import bce_loss, mse_loss
from .nn.network import LayerSpec, Network, NetworkSpec
from .nn.optim import TrainConfig, learning_rate_at, sgd_step
from .raster import save_field

log = logging.getLogger(__name__)

TRANSITIONS = {
    "forest_to_agriculture": (2, 1),
    "agriculture_to_forest": (1, 2),
    "agriculture_to_built_up": (1, 3),
}
CONV_TRUNKS = {
    "forest_to_agriculture": (128, 256, 512, 1024),
    "agriculture_to_forest": (128, 256, 512, 1024),
    "agriculture_to_built_up": (256, 512, 1024, 2048),
}
CONV_CLASSIFIERS = {
    "forest_to_agriculture": (1036, 400, 80, 7),
    "agriculture_to_forest": (1036, 400, 80, 7),
    "agriculture_to_built_up": (2048, 800, 300, 120, 60),
}
CDAE_CLASSIFIERS = {
    "forest_to_agriculture": (579, 579, 579),
    "agriculture_to_forest": (579, 579, 579),
    "agriculture_to_built_up": (579, 579, 579, 100),
}
CDAE_ENCODER = (64, 128)
CONV_PATCH = 27
CDAE_PATCH = 81
N_BANDS = 7
DEFAULT_GEO_WIDTHS = (64, 32)


class DivergenceError(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


def _scaled(widths, scale):
    return tuple(max(1, int(round(w * scale))) for w in widths)


def _mlp_layers(widths):
    out = []
    for w in widths:
        out += [LayerSpec.dense(w), LayerSpec.of("relu")]
    return out


def _output_head():
    return [LayerSpec.dense(1), LayerSpec.of("sigmoid")]


# ---------------------------------------------------------------------------
# Architecture specs

@dataclass(frozen=True)
class GeoNetSpec:
    feature_count: int
    hidden_widths: Tuple[int, ...] = DEFAULT_GEO_WIDTHS
    kind: str = "geo"

    def network(self) -> NetworkSpec:
        return NetworkSpec(_mlp_layers(self.hidden_widths) + _output_head(), (self.feature_count,))


@dataclass(frozen=True)
class ConvNetSpec:
    feature_count: int
    trunk_filters: Tuple[int, ...]
    classifier_widths: Tuple[int, ...]
    geo_widths: Tuple[int, ...] = DEFAULT_GEO_WIDTHS
    filter_size: int = 3
    spatial_weight: bool = True
    pooling: str = "max_pool"
    pooled_blocks: int = 2
    patch_size: int = CONV_PATCH
    bands: int = N_BANDS
    transition: str = "forest_to_agriculture"
    kind: str = "conv"

    def trunk(self) -> NetworkSpec:
        layers = []
        for i, f in enumerate(self.trunk_filters):
            layers += [LayerSpec.conv(f, self.filter_size, pad=self.filter_size // 2),
                       LayerSpec.of("batchnorm"), LayerSpec.of("relu")]
            if self.spatial_weight:
                layers.append(LayerSpec.of("spatial_weight"))
            if i < self.pooled_blocks:
                layers.append(LayerSpec.pool(self.pooling))
        layers.append(LayerSpec.of("global_avg_pool"))
        return NetworkSpec(layers, (self.bands, self.patch_size, self.patch_size))

    def geo(self) -> NetworkSpec:
        return NetworkSpec(_mlp_layers(self.geo_widths), (self.feature_count,))

    def head(self) -> NetworkSpec:
        width = self.trunk_filters[-1] + (self.geo_widths[-1] if self.geo_widths else self.feature_count)
        return NetworkSpec(_mlp_layers(self.classifier_widths) + _output_head(), (width,))

    def validate(self):
        self.trunk().validate()
        self.geo().validate() if self.geo_widths else None
        return self.head().validate()


@dataclass(frozen=True)
class CdaeSpec:
    feature_count: int
    encoder_filters: Tuple[int, ...] = CDAE_ENCODER
    classifier_widths: Tuple[int, ...] = CDAE_CLASSIFIERS["forest_to_agriculture"]
    filter_size: int = 3
    patch_size: int = CDAE_PATCH
    bands: int = N_BANDS
    corruption_sigma: float = 0.3
    transition: str = "forest_to_agriculture"
    kind: str = "cdae"

    def encoder(self) -> NetworkSpec:
        layers = []
        for f in self.encoder_filters:
            layers += [LayerSpec.conv(f, self.filter_size, pad=self.filter_size // 2),
                       LayerSpec.of("batchnorm"), LayerSpec.of("relu"), LayerSpec.pool("max_pool")]
        return NetworkSpec(layers, (self.bands, self.patch_size, self.patch_size))

    def decoder(self) -> NetworkSpec:
        # mirror of the encoder; output channels step back through the encoder widths
        outs = list(self.encoder_filters[:-1][::-1]) + [self.bands]
        layers = []
        for j, c in enumerate(outs):
            layers += [LayerSpec.of("upsample"),
                       LayerSpec.tconv(c, self.filter_size, pad=self.filter_size // 2)]
            if j < len(outs) - 1:
                layers += [LayerSpec.of("batchnorm"), LayerSpec.of("relu")]
        return NetworkSpec(layers, self.encoder().output_shape)

    def autoencoder(self) -> NetworkSpec:
        return NetworkSpec(self.encoder().layers + self.decoder().layers,
                           (self.bands, self.patch_size, self.patch_size))

    @property
    def latent_length(self) -> int:
        return int(np.prod(self.encoder().output_shape))

    def classifier(self) -> NetworkSpec:
        return NetworkSpec(_mlp_layers(self.classifier_widths) + _output_head(),
                           (self.latent_length + self.feature_count,))


def build_geo_net(feature_count: int, hidden_widths: Sequence[int] = DEFAULT_GEO_WIDTHS) -> GeoNetSpec:
    if feature_count < 1:
        raise ValueError("feature_count must be >= 1")
    if not hidden_widths:
        raise ValueError("geo-net needs at least one hidden layer")
    spec = GeoNetSpec(feature_count, tuple(hidden_widths))
    spec.network().validate()
    return spec


def build_conv_net(transition: str, feature_count: int, width_scale: float = 1.0,
                   **overrides) -> ConvNetSpec:
    """Two-branch conv-net for one of the supported transitions.

    ``width_scale`` multiplies every filter and dense width; ``overrides`` set
    any :class:`ConvNetSpec` field (filter size, spatial weight on/off, pooling).
    """
    if transition not in CONV_TRUNKS:
        raise ValueError(f"unknown transition {transition!r}; expected one of {sorted(CONV_TRUNKS)}")
    spec = ConvNetSpec(feature_count=feature_count,
                       trunk_filters=_scaled(CONV_TRUNKS[transition], width_scale),
                       classifier_widths=_scaled(CONV_CLASSIFIERS[transition], width_scale),
                       transition=transition)
    spec = replace(spec, **overrides)
    spec.validate()
    return spec


def build_cdae(band_count: int = N_BANDS, feature_count: int = 11,
               transition: str = "forest_to_agriculture", width_scale: float = 1.0,
               **overrides) -> CdaeSpec:
    if band_count < 1:
        raise ValueError("band_count must be >= 1")
    if transition not in CDAE_CLASSIFIERS:
        raise ValueError(f"unknown transition {transition!r}")
    spec = CdaeSpec(feature_count=feature_count, bands=band_count,
                    encoder_filters=_scaled(CDAE_ENCODER, width_scale),
                    classifier_widths=_scaled(CDAE_CLASSIFIERS[transition], width_scale),
                    transition=transition)
    spec = replace(spec, **overrides)
    spec.autoencoder().validate()
    spec.classifier().validate()
    return spec


# ---------------------------------------------------------------------------
# Augmentation

def corrupt(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian corruption."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.array(image, dtype=np.float64, copy=True)
    return image + rng.normal(0.0, sigma, size=np.shape(image))


def jitter(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Per-band illumination scaling by ``clip(1 + N(0, strength^2), 0.5, 1.5)``.

    Accepts ``(bands, H, W)`` or a batch ``(N, bands, H, W)``; each sample gets
    its own factors. No flips or rotations.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if strength == 0:
        return image.copy()
    lead = image.shape[:-2]
    factors = np.clip(1.0 + rng.normal(0.0, strength, size=lead), 0.5, 1.5)
    return image * factors[..., None, None]


# ---------------------------------------------------------------------------
# Runtime models

def _split_grads(grads, prefix):
    return {k: v for k, v in grads.items() if k.startswith(prefix)}


class ClassifierModel:
    """Common interface: ``params``/``set_params``, batched predict and loss."""

    kind = "base"
    needs_images = False
    patch_size = 0
    predict_chunk = 512

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for net in self.trainable_networks():
            out.update(net.named_params())
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for net in self.all_networks():
            out.update(net.named_buffers())
        return out

    def set_params(self, params):
        for net in self.trainable_networks():
            net.set_params(params)

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for net in self.all_networks():
            out.update(net.named_params())
        out.update({"buffer/" + k: v for k, v in self.buffers().items()})
        return out

    def load_state(self, state):
        for net in self.all_networks():
            for k in list(net.params):
                net.params[k] = np.array(state[net.prefix + k])
            for k in list(net.buffers):
                net.buffers[k] = np.array(state["buffer/" + net.prefix + k])

    def trainable_networks(self) -> List[Network]:
        return self.all_networks()

    def all_networks(self) -> List[Network]:
        raise NotImplementedError

    def forward(self, features, patches, mode="train", update_stats=True, keep=False):
        raise NotImplementedError

    def backward(self, dprob, cache):
        raise NotImplementedError

    def loss_and_grads(self, features, patches, labels, mode="train", update_stats=True):
        prob, cache = self.forward(features, patches, mode, update_stats)
        loss, dprob = bce_loss(prob, np.asarray(labels, dtype=np.float64))
        return loss, self.backward(dprob, cache), self.signature(cache)

    def signature(self, cache) -> bytes:
        return b""

    def predict(self, features, patches=None) -> np.ndarray:
        prob, _ = self.forward(features, patches, mode="inference", update_stats=False)
        return prob

    def batch_inputs(self, dataset: Dataset, idx, image=None, jitter_rng=None, jitter_strength=0.0):
        """Image input for ``forward`` at dataset rows ``idx`` (None when unused)."""
        if not self.needs_images:
            return None
        patches = dataset.patch_batch(idx, self.patch_size, image)
        if jitter_rng is not None and jitter_strength > 0:
            patches = jitter(patches, jitter_rng, jitter_strength)
        return patches

    def predict_dataset(self, dataset: Dataset, indices=None, image=None) -> np.ndarray:
        indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
        out = np.empty(len(indices))
        for s in range(0, len(indices), self.predict_chunk):
            idx = indices[s:s + self.predict_chunk]
            out[s:s + len(idx)] = self.predict(dataset.features[idx],
                                               self.batch_inputs(dataset, idx, image))
        return out


class GeoNetModel(ClassifierModel):
    kind = "geo"

    def __init__(self, spec: GeoNetSpec, rng=None):
        self.spec = spec
        self.net = Network(spec.network(), rng, prefix="geo/")

    def all_networks(self):
        return [self.net]

    def forward(self, features, patches=None, mode="train", update_stats=True, keep=False):
        out, c = self.net.forward(features, mode, update_stats, keep)
        return out[:, 0], c

    def backward(self, dprob, cache):
        return self.net.backward(dprob[:, None], cache)[1]

    def signature(self, cache):
        return self.net.kink_signature(cache)


class ConvNetModel(ClassifierModel):
    kind = "conv"
    needs_images = True
    predict_chunk = 256

    def __init__(self, spec: ConvNetSpec, rng=None):
        self.spec = spec
        self.patch_size = spec.patch_size
        self.trunk = Network(spec.trunk(), rng, prefix="trunk/")
        self.geo = Network(spec.geo(), rng, prefix="geo/") if spec.geo_widths else None
        self.head = Network(spec.head(), rng, prefix="head/")

    def all_networks(self):
        return [n for n in (self.trunk, self.geo, self.head) if n is not None]

    def forward(self, features, patches, mode="train", update_stats=True, keep=False):
        if patches is None:
            raise ValueError("conv-net needs image patches")
        t, ct = self.trunk.forward(patches, mode, update_stats, keep)
        if self.geo is not None:
            g, cg = self.geo.forward(features, mode, update_stats, keep)
        else:
            g, cg = np.asarray(features, dtype=np.float64), None
        z = np.concatenate([t, g], axis=1)
        out, ch = self.head.forward(z, mode, update_stats, keep)
        return out[:, 0], (ct, cg, ch, t.shape[1])

    def backward(self, dprob, cache):
        ct, cg, ch, nt = cache
        dz, grads = self.head.backward(dprob[:, None], ch)
        grads.update(self.trunk.backward(dz[:, :nt], ct)[1])
        if self.geo is not None:
            grads.update(self.geo.backward(dz[:, nt:], cg)[1])
        return grads

    def signature(self, cache):
        ct, cg, ch, _ = cache
        sig = self.trunk.kink_signature(ct) + self.head.kink_signature(ch)
        return sig + (self.geo.kink_signature(cg) if self.geo is not None else b"")


class CdaeModel:
    """Convolutional denoising autoencoder with untied encoder/decoder weights."""

    kind = "cdae_ae"

    def __init__(self, spec: CdaeSpec, rng=None):
        self.spec = spec
        self.encoder = Network(spec.encoder(), rng, prefix="enc/")
        self.decoder = Network(spec.decoder(), rng, prefix="dec/")

    params = ClassifierModel.params
    buffers = ClassifierModel.buffers
    set_params = ClassifierModel.set_params
    state = ClassifierModel.state
    load_state = ClassifierModel.load_state
    trainable_networks = ClassifierModel.trainable_networks

    def all_networks(self):
        return [self.encoder, self.decoder]

    def reconstruct(self, x, mode="inference", update_stats=False):
        h, ce = self.encoder.forward(x, mode, update_stats)
        y, cd = self.decoder.forward(h, mode, update_stats)
        return y, (ce, cd)

    def loss_and_grads(self, noisy, clean, mode="train", update_stats=True):
        y, (ce, cd) = self.reconstruct(noisy, mode, update_stats)
        loss, dy = mse_loss(y, clean)
        dh, grads = self.decoder.backward(dy, cd)
        grads.update(self.encoder.backward(dh, ce)[1])
        sig = self.encoder.kink_signature(ce) + self.decoder.kink_signature(cd)
        return loss, grads, sig

    def encode(self, x) -> np.ndarray:
        """Encoder forward in inference mode, raveled to ``(N, latent_length)``."""
        h, _ = self.encoder.forward(x, "inference", False)
        return h.reshape(h.shape[0], -1)

    def mse(self, patches, chunk=64) -> float:
        total = 0.0
        for s in range(0, len(patches), chunk):
            y, _ = self.reconstruct(patches[s:s + chunk])
            total += float(np.sum((y - patches[s:s + chunk]) ** 2))
        return total / np.size(patches)


class CdaeNetModel(ClassifierModel):
    """MLP classifier over the frozen CDAE latent concatenated with geo features."""

    kind = "cdae"
    needs_images = True
    predict_chunk = 64

    def __init__(self, spec: CdaeSpec, autoencoder: CdaeModel, rng=None):
        self.spec = spec
        self.patch_size = spec.patch_size
        self.autoencoder = autoencoder
        self.net = Network(spec.classifier(), rng, prefix="clf/")
        self._latents = {}

    def trainable_networks(self):
        return [self.net]

    def all_networks(self):
        return [self.autoencoder.encoder, self.autoencoder.decoder, self.net]

    def batch_inputs(self, dataset: Dataset, idx, image=None, jitter_rng=None, jitter_strength=0.0):
        # the encoder is frozen, so latents are computed once per dataset row;
        # jitter is not applied to a fixed representation
        if image is not None:
            return self.autoencoder.encode(dataset.patch_batch(idx, self.patch_size, image))
        key = id(dataset)
        if key not in self._latents:
            self._latents[key] = (dataset, np.zeros((len(dataset), self.spec.latent_length)),
                                  np.zeros(len(dataset), dtype=bool))
        _, lat, have = self._latents[key]
        idx = np.asarray(idx)
        todo = np.unique(idx[~have[idx]])
        for s in range(0, todo.size, self.predict_chunk):
            part = todo[s:s + self.predict_chunk]
            lat[part] = self.autoencoder.encode(dataset.patch_batch(part, self.patch_size))
            have[part] = True
        return lat[idx]

    def clear_cache(self):
        self._latents = {}

    def inputs(self, features, patches):
        """Latent (encoded from ``(N, B, S, S)`` patches, or given as ``(N, L)``) plus features."""
        if patches is None:
            raise ValueError("cdae-net needs image patches")
        latent = self.autoencoder.encode(patches) if np.ndim(patches) == 4 else patches
        return np.concatenate([latent, np.asarray(features, dtype=np.float64)], axis=1)

    def forward(self, features, patches, mode="train", update_stats=True, keep=False):
        out, c = self.net.forward(self.inputs(features, patches), mode, update_stats, keep)
        return out[:, 0], c

    def backward(self, dprob, cache):
        return self.net.backward(dprob[:, None], cache)[1]

    def signature(self, cache):
        return self.net.kink_signature(cache)


def build_model(spec, seed: int = 0, autoencoder: Optional[CdaeModel] = None):
    rng = np.random.default_rng([seed, 0])
    if spec.kind == "geo":
        return GeoNetModel(spec, rng)
    if spec.kind == "conv":
        return ConvNetModel(spec, rng)
    if spec.kind == "cdae":
        if autoencoder is None:
            raise ValueError("cdae-net classifier needs a trained autoencoder")
        return CdaeNetModel(spec, autoencoder, rng)
    raise ValueError(f"unknown model kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainedModel:
    model: object
    history: List[tuple] = field(default_factory=list)
    transition: Tuple[int, int] = (0, 0)
    feature_names: Tuple[str, ...] = ()
    means: Optional[np.ndarray] = None
    sds: Optional[np.ndarray] = None
    config: Dict = field(default_factory=dict)
    metrics: Dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.model.kind

    def predict_dataset(self, dataset, indices=None, image=None):
        return self.model.predict_dataset(dataset, indices, image)


def params_digest(params: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def _snapshot(model):
    return {k: v.copy() for k, v in model.state().items()}


def _validation_subset(n, limit, seed):
    if limit is None or n <= limit:
        return np.arange(n)
    return np.sort(np.random.default_rng([seed, 4]).choice(n, limit, replace=False))


def train_classifier(model: ClassifierModel, train: Dataset, validation: Dataset,
                     config: TrainConfig, jitter_strength: float = 0.05,
                     max_validation: Optional[int] = 2000) -> TrainedModel:
    """Balanced mini-batch SGD on BCE; keeps the parameters with best validation loss."""
    for name, ds in (("train", train), ("validation", validation)):
        if len(ds) == 0 or ds.positive_indices.size == 0 or ds.negative_indices.size == 0:
            raise ValueError(f"{name} set must contain both classes")
    seed = config.rng_seed
    batch_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    jitter_rng = np.random.default_rng([seed, 3])
    val_idx = _validation_subset(len(validation), max_validation, seed)
    val_labels = validation.labels[val_idx].astype(np.float64)

    params = model.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    best_loss, best_state = np.inf, _snapshot(model)
    history, running = [], []
    for step in range(config.max_steps):
        mb = balanced_minibatch(train, config.batch_size, batch_rng)
        patches = model.batch_inputs(train, mb.indices, None, jitter_rng, jitter_strength)
        loss, grads, _ = model.loss_and_grads(train.features[mb.indices], patches, mb.labels)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        params, velocity = sgd_step(params, grads, velocity, config, step, noise_rng)
        model.set_params(params)
        running.append(loss)
        last = step == config.max_steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            probs = model.predict_dataset(validation, val_idx)
            val_loss, _ = bce_loss(probs, val_labels)
            if not np.isfinite(val_loss):
                raise DivergenceError(step, val_loss)
            history.append((step + 1, learning_rate_at(config, step),
                            float(np.mean(running)), float(val_loss)))
            log.debug("step=%d train_loss=%.5f validation_loss=%.5f", step + 1,
                      history[-1][2], val_loss)
            running = []
            if val_loss < best_loss:
                best_loss, best_state = val_loss, _snapshot(model)
    model.load_state(best_state)
    if hasattr(model, "clear_cache"):
        model.clear_cache()
    return TrainedModel(model, history, train.transition, config=config.as_dict(),
                        metrics={"best_validation_loss": float(best_loss)})


def train_cdae(spec: CdaeSpec, images, config: TrainConfig,
               corruption_sigma: Optional[float] = None,
               validation_images: Optional[np.ndarray] = None) -> TrainedModel:
    """Fit the autoencoder to map corrupted patches back to the clean ones.

    ``images`` is an array ``(N, bands, S, S)`` or a :class:`Dataset` whose
    patches are cropped on demand.
    """
    sigma = spec.corruption_sigma if corruption_sigma is None else corruption_sigma
    n = len(images)
    if n == 0:
        raise ValueError("train_cdae needs at least one image")
    seed = config.rng_seed
    model = CdaeModel(spec, np.random.default_rng([seed, 0]))
    batch_rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    corrupt_rng = np.random.default_rng([seed, 5])

    def batch(idx):
        if isinstance(images, Dataset):
            return images.patch_batch(idx, spec.patch_size)
        return np.asarray(images[idx], dtype=np.float64)

    params = model.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history, running = [], []
    best_loss, best_state = np.inf, _snapshot(model)
    for step in range(config.max_steps):
        idx = batch_rng.integers(0, n, config.batch_size)
        clean = batch(idx)
        loss, grads, _ = model.loss_and_grads(corrupt(clean, sigma, corrupt_rng), clean)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        params, velocity = sgd_step(params, grads, velocity, config, step, noise_rng)
        model.set_params(params)
        running.append(loss)
        last = step == config.max_steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            val = model.mse(validation_images) if validation_images is not None else np.nan
            history.append((step + 1, learning_rate_at(config, step), float(np.mean(running)),
                            float(val)))
            running = []
            if validation_images is not None and val < best_loss:
                best_loss, best_state = val, _snapshot(model)
    if validation_images is not None:
        model.load_state(best_state)
    return TrainedModel(model, history, config=config.as_dict(),
                        metrics={"corruption_sigma": sigma})


def encode_latent(model, image: np.ndarray) -> np.ndarray:
    """Latent vector of one ``(bands, S, S)`` patch (no corruption)."""
    ae = model.model if isinstance(model, TrainedModel) else model
    if isinstance(ae, CdaeNetModel):
        ae = ae.autoencoder
    expected = ae.encoder.spec.input_shape
    if tuple(np.shape(image)) != tuple(expected):
        raise ValueError(f"image shape {np.shape(image)} != encoder input {expected}")
    return ae.encode(np.asarray(image, dtype=np.float64)[None])[0]


def predict_probability(model, features, patches=None) -> np.ndarray:
    m = model.model if isinstance(model, TrainedModel) else model
    if m.needs_images and patches is None:
        raise ValueError(f"{m.kind}-net needs image patches")
    return m.predict(features, patches)


def probability_map(trained: TrainedModel, dataset: Dataset, shape) -> np.ndarray:
    """Per-cell probability over the dataset's cells; NaN elsewhere."""
    out = np.full(shape, np.nan)
    out[dataset.rows, dataset.cols] = trained.predict_dataset(dataset)
    return out


def first_conv_activation_index(model) -> Tuple[Network, int]:
    """Network and layer index of the first conv block's ReLU output."""
    net = {"conv": lambda m: m.trunk, "cdae": lambda m: m.autoencoder.encoder,
           "cdae_ae": lambda m: m.encoder}[model.kind](model)
    kinds = [l.kind for l in net.spec.layers]
    return net, kinds.index("relu")


def export_activations(model, sample_patch: np.ndarray, layer_index: Optional[int], path,
                       network: Optional[Network] = None) -> np.ndarray:
    """Write the ``(filters, H, W)`` output of one layer for one patch as LUCF (64-bit).

    With ``layer_index=None`` the first conv block's post-ReLU map is exported.
    """
    m = model.model if isinstance(model, TrainedModel) else model
    if network is None:
        network, default_index = first_conv_activation_index(m)
        layer_index = default_index if layer_index is None else layer_index
    if layer_index is None or not 0 <= layer_index < len(network.spec.layers):
        raise IndexError(f"layer index {layer_index} out of range")
    out, caches = network.forward(np.asarray(sample_patch, dtype=np.float64)[None],
                                  "inference", False, keep=True)
    act = caches.outputs[layer_index][0]
    if act.ndim != 3:
        raise ValueError(f"layer {layer_index} output is not a feature map")
    save_field(act, path, float64=True)
    return act


# ---------------------------------------------------------------------------
# Persistence

def _spec_from_dict(d):
    d = dict(d)
    kind = d.get("kind")
    cls = {"geo": GeoNetSpec, "conv": ConvNetSpec, "cdae": CdaeSpec}[kind]
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    return cls(**d)


def save_trained_model(trained: TrainedModel, prefix) -> None:
    """``<prefix>.lucw`` weights, ``<prefix>.json`` manifest, ``<prefix>.history.csv``."""
    prefix = Path(prefix)
    m = trained.model
    save_weights(m.state(), prefix.with_suffix(".lucw"))
    manifest = {
        "kind": m.kind,
        "spec": asdict(m.spec),
        "transition": list(trained.transition),
        "feature_names": list(trained.feature_names),
        "means": None if trained.means is None else [float(x) for x in trained.means],
        "sds": None if trained.sds is None else [float(x) for x in trained.sds],
        "config": trained.config,
        "metrics": trained.metrics,
    }
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_history(trained.history, prefix.with_suffix(".history.csv"))


def load_trained_model(prefix) -> TrainedModel:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    state = load_weights(prefix.with_suffix(".lucw"))
    spec = _spec_from_dict(manifest["spec"])
    kind = manifest["kind"]
    if kind == "cdae_ae":
        model = CdaeModel(spec, np.random.default_rng(0))
    elif kind == "cdae":
        model = CdaeNetModel(spec, CdaeModel(spec, np.random.default_rng(0)),
                             np.random.default_rng(0))
    else:
        model = build_model(spec)
    model.load_state(state)
    means = manifest.get("means")
    sds = manifest.get("sds")
    return TrainedModel(model, [], tuple(manifest["transition"]),
                        tuple(manifest.get("feature_names", ())),
                        None if means is None else np.array(means),
                        None if sds is None else np.array(sds),
                        manifest.get("config", {}), manifest.get("metrics", {}))
