"""Encoder backends and the projection head that maps them into a shared space.

Backbones are frozen feature extractors behind :class:`EncoderBackend`; only
the projection heads train. The head is plain numpy with a hand-written
backward pass so it runs anywhere and can be gradient-checked.
"""
import enum
import hashlib
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.special import erf

from .data import NORM_MEAN, PreprocessedImage, denormalize, normalize_class_name
from .errors import InvalidInputError, ShapeError, UnknownLabelError
from .kernels import nearest_colour_counts

LN_EPS = 1e-5
NORM_TOL = 1e-6


class Modality(str, enum.Enum):
    IMAGE = "image"
    TEXT = "text"


@dataclass
class EmbeddingBatch:
    vectors: np.ndarray
    modality: Modality
    normalized: bool = True

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ShapeError(f"embedding batch must be 2-D, got {self.vectors.shape}")
        self.modality = Modality(self.modality)
        if self.normalized and len(self.vectors):
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.max(np.abs(norms - 1.0)) > NORM_TOL:
                raise InvalidInputError("batch marked normalized has rows with norm != 1")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


# --------------------------------------------------------------------------
# projection head
# --------------------------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


class ProjectionHead:
    """linear -> GELU -> linear -> dropout -> (+ first linear) -> LayerNorm -> L2.

    ``activation``, ``residual``, ``layer_norm`` and ``l2_normalize`` switch the
    individual stages; turning off all but the linear maps gives the debug
    configuration used to hand-check the forward pass.
    """

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "gamma", "beta")

    def __init__(self, d_in: int, projection_dim: int, seed: int = 0, dropout: float = 0.1,
                 activation: str = "gelu", residual: bool = True, layer_norm: bool = True,
                 l2_normalize: bool = True):
        if activation not in ("gelu", "identity"):
            raise InvalidInputError(f"unknown activation {activation!r}")
        if not 0.0 <= dropout < 1.0:
            raise InvalidInputError(f"dropout must be in [0, 1), got {dropout}")
        self.d_in = int(d_in)
        self.projection_dim = int(projection_dim)
        self.dropout = float(dropout)
        self.activation = activation
        self.residual = residual
        self.layer_norm = layer_norm
        self.l2_normalize = l2_normalize
        rng = np.random.default_rng(seed)
        b1, b2 = 1.0 / np.sqrt(self.d_in), 1.0 / np.sqrt(self.projection_dim)
        D = self.projection_dim
        self.params = {
            "W1": rng.uniform(-b1, b1, (self.d_in, D)),
            "b1": rng.uniform(-b1, b1, D),
            "W2": rng.uniform(-b2, b2, (D, D)),
            "b2": rng.uniform(-b2, b2, D),
            "gamma": np.ones(D),
            "beta": np.zeros(D),
        }

    @classmethod
    def identity(cls, d_in: int, projection_dim: int, **kwargs) -> "ProjectionHead":
        """Identity (truncating/zero-padding) linear maps, zero biases."""
        head = cls(d_in, projection_dim, **kwargs)
        head.params["W1"] = np.eye(d_in, projection_dim)
        head.params["W2"] = np.eye(projection_dim)
        head.params["b1"] = np.zeros(projection_dim)
        head.params["b2"] = np.zeros(projection_dim)
        return head

    def hyperparameters(self) -> dict:
        return {"d_in": self.d_in, "projection_dim": self.projection_dim, "dropout": self.dropout,
                "activation": self.activation, "residual": self.residual,
                "layer_norm": self.layer_norm, "l2_normalize": self.l2_normalize}

    def copy(self) -> "ProjectionHead":
        other = ProjectionHead.__new__(ProjectionHead)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def state_dict(self, prefix: str = "") -> dict:
        return {prefix + k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for k in self.PARAM_NAMES:
            value = np.asarray(state[prefix + k], dtype=np.float64)
            if value.shape != self.params[k].shape:
                raise ShapeError(f"{prefix + k}: expected {self.params[k].shape}, got {value.shape}")
            self.params[k] = value.copy()

    def forward(self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None):
        """Return ``(output, cache)``; dropout only applies when ``train`` is true."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"head expects (B, {self.d_in}) input, got {x.shape}")
        p = self.params
        h1 = x @ p["W1"] + p["b1"]
        a = _gelu(h1) if self.activation == "gelu" else h1
        h2 = a @ p["W2"] + p["b2"]
        keep = None
        if train and self.dropout > 0.0:
            rng = rng if rng is not None else np.random.default_rng()
            keep = (rng.random(h2.shape) >= self.dropout) / (1.0 - self.dropout)
            h2 = h2 * keep
        z = h2 + h1 if self.residual else h2
        cache = {"x": x, "h1": h1, "a": a, "keep": keep}
        if self.layer_norm:
            mu = z.mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
            zn = (z - mu) * inv_std
            y = zn * p["gamma"] + p["beta"]
            cache.update(zn=zn, inv_std=inv_std)
        else:
            y = z
        if self.l2_normalize:
            norm = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
            out = y / norm
            cache.update(out=out, norm=norm)
        else:
            out = y
        return out, cache

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train, rng)[0]

    def backward(self, cache: dict, grad_out: np.ndarray) -> dict:
        """Parameter gradients for upstream gradient ``grad_out`` (same shape as the output)."""
        p = self.params
        g = np.asarray(grad_out, dtype=np.float64)
        if self.l2_normalize:
            out = cache["out"]
            g = (g - out * np.sum(out * g, axis=1, keepdims=True)) / cache["norm"]
        grads = {}
        if self.layer_norm:
            zn = cache["zn"]
            grads["gamma"] = np.sum(g * zn, axis=0)
            grads["beta"] = np.sum(g, axis=0)
            dzn = g * p["gamma"]
            g = cache["inv_std"] * (dzn - dzn.mean(axis=1, keepdims=True)
                                    - zn * np.mean(dzn * zn, axis=1, keepdims=True))
        else:
            grads["gamma"] = np.zeros_like(p["gamma"])
            grads["beta"] = np.zeros_like(p["beta"])
        dz = g
        dh2 = dz * cache["keep"] if cache["keep"] is not None else dz
        grads["W2"] = cache["a"].T @ dh2
        grads["b2"] = dh2.sum(axis=0)
        da = dh2 @ p["W2"].T
        dh1 = da * _gelu_grad(cache["h1"]) if self.activation == "gelu" else da
        if self.residual:
            dh1 = dh1 + dz
        grads["W1"] = cache["x"].T @ dh1
        grads["b1"] = dh1.sum(axis=0)
        return grads


def project(raw: np.ndarray, head: ProjectionHead, modality=Modality.IMAGE) -> EmbeddingBatch:
    """Evaluation-mode projection of raw backbone features."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != head.d_in:
        raise ShapeError(f"raw features have width {raw.shape[-1]}, head expects {head.d_in}")
    out = head(raw)
    return EmbeddingBatch(out, modality, normalized=head.l2_normalize)


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------

class EncoderBackend(Protocol):
    descriptor: str
    width: int

    def encode(self, inputs: Sequence) -> np.ndarray: ...


def _stable_bytes(item) -> bytes:
    if isinstance(item, bytes):
        return item
    if isinstance(item, str):
        return item.encode("utf-8")
    if isinstance(item, PreprocessedImage):
        item = item.pixels
    arr = np.ascontiguousarray(item, dtype=np.float32)
    return str(arr.shape).encode() + arr.tobytes()


def mock_hash_encoder(inputs: Sequence, d_in: int) -> np.ndarray:
    """Deterministic Gaussian rows (norm ~1) seeded by a BLAKE2b hash of each input."""
    if d_in < 1:
        raise InvalidInputError("d_in must be >= 1")
    out = np.empty((len(inputs), d_in))
    for i, item in enumerate(inputs):
        digest = hashlib.blake2b(_stable_bytes(item), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        out[i] = rng.standard_normal(d_in) / np.sqrt(d_in)
    return out


class HashBackend:
    """Test double: same vector for equal inputs, unrelated vectors otherwise."""

    def __init__(self, width: int = 512, modality: str = "any"):
        self.width = int(width)
        self.descriptor = f"hash-{modality}:{self.width}"

    def encode(self, inputs):
        return mock_hash_encoder(list(inputs), self.width)


class OraclePairedEncoder:
    """Labels mapped to mutually orthonormal vectors, identical across modalities.

    One extra orthonormal direction is reserved for background content, so at
    most ``dim - 1`` labels fit.
    """

    def __init__(self, labels: Sequence[str], dim: int = 128, seed: int = 0):
        names = [normalize_class_name(l) for l in labels]
        if len(set(names)) != len(names):
            raise InvalidInputError("oracle labels must be distinct")
        if len(names) + 1 > dim:
            raise InvalidInputError(f"{len(names)} labels need dim >= {len(names) + 1}")
        self.labels = tuple(names)
        self.dim = int(dim)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, len(names) + 1)))
        self._basis = q.T.copy()  # rows are orthonormal
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def background(self) -> np.ndarray:
        return self._basis[-1].copy()

    def vector(self, label: str, modality=Modality.TEXT) -> np.ndarray:
        Modality(modality)
        key = normalize_class_name(label)
        if key not in self._index:
            raise UnknownLabelError(f"label {label!r} is not registered")
        return self._basis[self._index[key]].copy()

    def text_backend(self) -> "OracleTextBackend":
        return OracleTextBackend(self)

    def image_backend(self, palette: dict, fill=None, background=(255, 255, 255)) -> "OracleImageBackend":
        return OracleImageBackend(self, palette, fill=fill, background=background)


def oracle_paired_encoder(oracle: OraclePairedEncoder, label: str, modality) -> np.ndarray:
    return oracle.vector(label, modality)


class OracleTextBackend:
    def __init__(self, oracle: OraclePairedEncoder):
        self.oracle = oracle
        self.width = oracle.dim
        self.descriptor = f"oracle-text:{oracle.dim}"

    def encode(self, inputs):
        if not len(inputs):
            return np.zeros((0, self.width))
        return np.stack([self.oracle.vector(t, Modality.TEXT) for t in inputs])


class OracleImageBackend:
    """Reads a crop's colour content and mixes the matching label vectors.

    Every pixel snaps to the nearest of: palette colours, the background
    colour, the fill colour. Fill pixels are ignored; the rest contribute
    their colour's vector weighted by pixel share.
    """

    def __init__(self, oracle: OraclePairedEncoder, palette: dict, fill=None,
                 background=(255, 255, 255)):
        self.oracle = oracle
        self.width = oracle.dim
        self.descriptor = f"oracle-image:{oracle.dim}"
        fill = tuple(int(round(255 * m)) for m in NORM_MEAN) if fill is None else tuple(fill)
        self._labels = [normalize_class_name(k) for k in palette]
        colours = [tuple(v) for v in palette.values()] + [tuple(background), fill]
        self._colours = np.asarray(colours, dtype=np.float64)
        self._vectors = np.stack([oracle.vector(l) for l in self._labels] + [oracle.background])

    def _encode_one(self, item) -> np.ndarray:
        pixels = item.pixels if isinstance(item, PreprocessedImage) else np.asarray(item)
        counts = nearest_colour_counts(denormalize(pixels), self._colours)[:-1].astype(np.float64)
        if counts.sum() == 0:
            return self.oracle.background
        return l2_normalize(counts @ self._vectors)

    def encode(self, inputs):
        if not len(inputs):
            return np.zeros((0, self.width))
        return np.stack([self._encode_one(x) for x in inputs])


class TorchvisionImageBackend:
    """Frozen torchvision classifier trunk (``fc`` removed) on preprocessed images."""

    def __init__(self, arch: str = "resnet50", weights: Optional[str] = "DEFAULT", device: str = "cpu"):
        import torch
        import torchvision

        self._torch = torch
        model = getattr(torchvision.models, arch)(weights=weights)
        self.width = int(model.fc.in_features)
        model.fc = torch.nn.Identity()
        self.model = model.eval().to(device)
        self.device = device
        self.descriptor = f"torchvision-{arch}:{self.width}"

    def encode(self, inputs):
        torch = self._torch
        if not len(inputs):
            return np.zeros((0, self.width))
        arr = np.stack([x.pixels if isinstance(x, PreprocessedImage) else np.asarray(x) for x in inputs])
        batch = torch.from_numpy(arr.transpose(0, 3, 1, 2).astype(np.float32)).to(self.device)
        with torch.no_grad():
            return self.model(batch).cpu().numpy().astype(np.float64)


class HFTextBackend:
    """Frozen Hugging Face text encoder; the first-token hidden state is the feature."""

    def __init__(self, model_name: str = "distilbert-base-uncased", device: str = "cpu", max_length: int = 32):
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name).eval().to(device)
        self.width = int(self.model.config.hidden_size if hasattr(self.model.config, "hidden_size")
                         else self.model.config.dim)
        self.device = device
        self.max_length = max_length
        self.descriptor = f"hf-{model_name}:{self.width}"

    def encode(self, inputs):
        torch = self._torch
        if not len(inputs):
            return np.zeros((0, self.width))
        tok = self.tokenizer(list(inputs), padding=True, truncation=True,
                             max_length=self.max_length, return_tensors="pt").to(self.device)
        with torch.no_grad():
            hidden = self.model(**tok).last_hidden_state
        return hidden[:, 0].cpu().numpy().astype(np.float64)


class PathImageBackend:
    """Loads and preprocesses image paths before handing them to an image backend."""

    def __init__(self, inner, mean=None, std=None):
        from .data import NORM_STD

        self.inner = inner
        self.width = inner.width
        self.descriptor = inner.descriptor
        self.mean = NORM_MEAN if mean is None else mean
        self.std = NORM_STD if std is None else std

    def encode(self, inputs):
        from .data import load_image, preprocess_image

        items = [preprocess_image(load_image(p), str(p), self.mean, self.std)
                 if isinstance(p, str) else p for p in inputs]
        return self.inner.encode(items)


def encode_in_chunks(backend, inputs: Sequence, chunk: int = 64) -> np.ndarray:
    """Encode a long input list piecewise; result independent of ``chunk``."""
    inputs = list(inputs)
    if not inputs:
        return np.zeros((0, backend.width))
    parts = [np.asarray(backend.encode(inputs[i:i + chunk]), dtype=np.float64)
             for i in range(0, len(inputs), chunk)]
    out = np.concatenate(parts)
    if out.shape[1] != backend.width:
        raise ShapeError(f"{backend.descriptor} returned width {out.shape[1]}, declared {backend.width}")
    return out


@dataclass
class EmbeddingModel:
    """Image and text backends plus their (optional) projection heads.

    A missing head means the raw backbone features are only L2-normalised,
    which is how the oracle backends are used.
    """

    image_backend: object
    text_backend: object
    image_head: Optional[ProjectionHead] = None
    text_head: Optional[ProjectionHead] = None

    def _embed(self, backend, head, inputs, modality, chunk):
        raw = encode_in_chunks(backend, inputs, chunk)
        if head is None:
            return EmbeddingBatch(l2_normalize(raw), modality, normalized=True)
        return project(raw, head, modality)

    def embed_images(self, images, chunk: int = 64) -> EmbeddingBatch:
        return self._embed(self.image_backend, self.image_head, images, Modality.IMAGE, chunk)

    def embed_texts(self, texts, chunk: int = 64) -> EmbeddingBatch:
        return self._embed(self.text_backend, self.text_head, texts, Modality.TEXT, chunk)

    def describe(self) -> dict:
        return {
            "image_backend": self.image_backend.descriptor,
            "text_backend": self.text_backend.descriptor,
            "image_head": None if self.image_head is None else self.image_head.hyperparameters(),
            "text_head": None if self.text_head is None else self.text_head.hyperparameters(),
        }
