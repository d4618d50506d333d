"""Toy conditional denoiser, fine-grained classifier, pluggable decoder.

The denoiser is an MLP over [flattened image | sinusoidal time embedding |
class embedding | style embedding] with a separate contour branch whose
output is injected into the first hidden state scaled by the conditioning
strength.  Dropping the class to the null embedding row during training
enables classifier-free guidance; the contour branch is dropped with the
same probability, independently, so strength modulation at inference stays
in-distribution.

Forward passes are written against the functional tensor ops, so they run
on the autodiff tape during training and on plain numpy arrays during
sampling.

Images live in [-1, 1] model space; :func:`to_model_space` /
:func:`to_pixel_space` convert from/to 8-bit pixels.

Weights serialize to a flat binary container: magic "HGFA", version u32,
then per tensor (name-length u32, utf-8 name, rank u32, extents u64[],
float64 values, all little-endian).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from higfa.tensor import Tensor, backward, clip, concat, exp, log, matmul, tanh, tsum

__all__ = [
    "Conditioning",
    "Denoiser",
    "Classifier",
    "Decoder",
    "TrainingError",
    "denoise",
    "classify",
    "class_log_prob",
    "decode",
    "train_denoiser",
    "train_classifier",
    "evaluate_classifier",
    "to_model_space",
    "to_pixel_space",
    "save_weights",
    "load_weights",
    "save_denoiser",
    "load_denoiser",
    "save_classifier",
    "load_classifier",
    "IMAGE_SIZE",
    "N_STYLES",
]

log_ = logging.getLogger(__name__)

IMAGE_SIZE = 16
N_STYLES = 4
_TEMB_DIM = 32
_HIDDEN = 256
_CLASS_EMB = 16
_STYLE_EMB = 8
_CLS_HIDDEN = 128

_MAGIC = b"HGFA"
_VERSION = 1


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or invalid data)."""


def to_model_space(img: np.ndarray) -> np.ndarray:
    """uint8 pixels -> flattened float in [-1, 1]."""
    return np.asarray(img, dtype=np.float64).reshape(-1) / 127.5 - 1.0


def to_pixel_space(x: np.ndarray, side: int = IMAGE_SIZE) -> np.ndarray:
    """Model-space vector -> clamped uint8 image."""
    arr = np.asarray(x, dtype=np.float64).reshape(side, side)
    return np.clip((arr + 1.0) * 127.5, 0.0, 255.0).round().astype(np.uint8)


@dataclass(frozen=True)
class Conditioning:
    """Class label (None marks the unconditional row) plus a style id."""

    class_id: int | None
    style_id: int = 0


def time_embedding(t, dim: int = _TEMB_DIM, t_max: int = 1000) -> np.ndarray:
    """Sinusoidal embedding of (batched) timesteps, shape (..., dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] / t_max * 1000.0 * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


@dataclass
class Denoiser:
    """Noise-prediction MLP with class/style conditioning and a contour branch."""

    params: dict[str, Tensor]
    n_classes: int
    image_size: int = IMAGE_SIZE
    n_styles: int = N_STYLES
    hidden: int = _HIDDEN
    temb_dim: int = _TEMB_DIM
    t_max: int = 1000

    @classmethod
    def create(cls, n_classes: int, seed: int, *, image_size: int = IMAGE_SIZE,
               n_styles: int = N_STYLES, hidden: int = _HIDDEN,
               temb_dim: int = _TEMB_DIM, t_max: int = 1000) -> "Denoiser":
        rng = np.random.default_rng(seed)
        d = image_size * image_size
        in_dim = d + temb_dim + _CLASS_EMB + _STYLE_EMB
        p = {
            "class_emb": rng.normal(0.0, 0.5, size=(n_classes + 1, _CLASS_EMB)),
            "style_emb": rng.normal(0.0, 0.5, size=(n_styles, _STYLE_EMB)),
            "w1": _init(rng, in_dim, hidden), "b1": np.zeros(hidden),
            "w2": _init(rng, hidden, hidden), "b2": np.zeros(hidden),
            "w3": _init(rng, hidden, hidden), "b3": np.zeros(hidden),
            "w_out": _init(rng, hidden, d), "b_out": np.zeros(d),
            "ctr_w1": _init(rng, d, hidden), "ctr_b1": np.zeros(hidden),
            "ctr_w2": _init(rng, hidden, hidden), "ctr_b2": np.zeros(hidden),
        }
        params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        return cls(params=params, n_classes=n_classes, image_size=image_size,
                   n_styles=n_styles, hidden=hidden, temb_dim=temb_dim, t_max=t_max)

    def frozen(self) -> "Denoiser":
        """Read-only view with plain-array parameters: forwards skip the tape."""
        return Denoiser(params={k: np.asarray(getattr(v, "data", v)) for k, v in self.params.items()},
                        n_classes=self.n_classes, image_size=self.image_size,
                        n_styles=self.n_styles, hidden=self.hidden,
                        temb_dim=self.temb_dim, t_max=self.t_max)

    def null_class(self) -> int:
        return self.n_classes


@dataclass
class Classifier:
    """MLP with a softmax head over the fine-grained classes."""

    params: dict[str, Tensor]
    n_classes: int
    image_size: int = IMAGE_SIZE
    hidden: int = _CLS_HIDDEN

    @classmethod
    def create(cls, n_classes: int, seed: int, *, image_size: int = IMAGE_SIZE,
               hidden: int = _CLS_HIDDEN) -> "Classifier":
        if n_classes < 2:
            raise TrainingError(f"classifier needs >= 2 classes, got {n_classes}")
        rng = np.random.default_rng(seed)
        d = image_size * image_size
        p = {
            "w1": _init(rng, d, hidden), "b1": np.zeros(hidden),
            "w2": _init(rng, hidden, hidden), "b2": np.zeros(hidden),
            "w_out": _init(rng, hidden, n_classes), "b_out": np.zeros(n_classes),
        }
        params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        return cls(params=params, n_classes=n_classes, image_size=image_size, hidden=hidden)

    def frozen(self) -> "Classifier":
        """Read-only view with plain-array parameters: forwards skip the tape."""
        return Classifier(params={k: np.asarray(getattr(v, "data", v)) for k, v in self.params.items()},
                          n_classes=self.n_classes, image_size=self.image_size,
                          hidden=self.hidden)


@dataclass(frozen=True)
class Decoder:
    """Maps predicted clean vectors to classifier inputs.

    Identity mode returns its input untouched (the pixel-space default);
    linear mode applies a fixed affine map, exercising the decode-then-
    classify gradient path.
    """

    mode: str = "identity"
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    @classmethod
    def identity(cls) -> "Decoder":
        return cls(mode="identity")

    @classmethod
    def linear(cls, dim: int, seed: int, spread: float = 0.05) -> "Decoder":
        rng = np.random.default_rng(seed)
        w = np.eye(dim) + rng.normal(0.0, spread / np.sqrt(dim), size=(dim, dim))
        b = rng.normal(0.0, spread, size=dim)
        return cls(mode="linear", weight=w, bias=b)


def decode(dec: Decoder, x):
    if dec.mode == "identity":
        return x
    if dec.mode == "linear":
        single = getattr(x, "ndim", 1) == 1
        xx = x.reshape(1, -1) if single else x
        out = matmul(xx, dec.weight) + dec.bias
        return out.reshape(-1) if single else out
    raise ValueError(f"unknown decoder mode {dec.mode!r}")


def _embed_rows(table: Tensor, indices: np.ndarray, n_rows: int):
    onehot = np.zeros((len(indices), n_rows))
    onehot[np.arange(len(indices)), indices] = 1.0
    return matmul(onehot, table)


def _cond_ids(d: Denoiser, cond) -> tuple[np.ndarray, np.ndarray]:
    conds = [cond] if isinstance(cond, Conditioning) else list(cond)
    class_ids = np.array(
        [d.null_class() if c.class_id is None else int(c.class_id) for c in conds]
    )
    if np.any(class_ids > d.n_classes) or np.any(class_ids < 0):
        raise ValueError(f"class id out of range for {d.n_classes} classes")
    style_ids = np.array([int(c.style_id) for c in conds])
    if np.any((style_ids < 0) | (style_ids >= d.n_styles)):
        raise ValueError(f"style id out of range for {d.n_styles} styles")
    return class_ids, style_ids


def denoise(d: Denoiser, x_t, t, cond, contour=None, s_ctl: float = 1.0,
            contour_keep: np.ndarray | None = None):
    """Predict the injected noise for x_t.

    ``x_t`` is a flattened image, (dim,) or (batch, dim).  ``contour`` is an
    EdgeMap, a pre-flattened 0/1 array, or None; with ``s_ctl == 0`` or no
    contour the branch contributes exactly nothing.  ``contour_keep`` is a
    per-row 0/1 training mask for independent branch dropout.
    """
    p = d.params
    dim = d.image_size * d.image_size
    single = getattr(x_t, "ndim", None) == 1
    x = x_t.reshape(1, -1) if single and isinstance(x_t, Tensor) else (
        np.reshape(x_t, (1, -1)) if single else x_t)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.shape[1] != dim:
        raise ValueError(f"denoise: expected image dim {dim}, got {xd.shape[1]}")
    b = xd.shape[0]

    temb = time_embedding(np.broadcast_to(np.asarray(t), (b,)), d.temb_dim, d.t_max)
    class_ids, style_ids = _cond_ids(d, cond)
    if len(class_ids) == 1 and b > 1:
        class_ids = np.repeat(class_ids, b)
        style_ids = np.repeat(style_ids, b)
    cemb = _embed_rows(p["class_emb"], class_ids, d.n_classes + 1)
    semb = _embed_rows(p["style_emb"], style_ids, d.n_styles)

    h = tanh(matmul(concat([x, temb, cemb, semb], axis=1), p["w1"]) + p["b1"])
    if contour is not None and s_ctl != 0.0:
        e = contour.bits.reshape(-1).astype(np.float64) if hasattr(contour, "bits") else \
            np.asarray(contour, dtype=np.float64).reshape(-1)
        e = np.broadcast_to(e, (b, dim))
        r = contour_residual(d, e)
        r = r * s_ctl
        if contour_keep is not None:
            r = r * np.asarray(contour_keep, dtype=np.float64).reshape(b, 1)
        h = h + r
    h = tanh(matmul(h, p["w2"]) + p["b2"])
    h = tanh(matmul(h, p["w3"]) + p["b3"])
    out = matmul(h, p["w_out"]) + p["b_out"]
    return out.reshape(-1) if single and isinstance(out, Tensor) else (
        np.reshape(out, (-1,)) if single else out)


def contour_residual(d: Denoiser, edge_flat):
    """The (unscaled) hidden-state residual the contour branch injects."""
    p = d.params
    return matmul(tanh(matmul(edge_flat, p["ctr_w1"]) + p["ctr_b1"]), p["ctr_w2"]) + p["ctr_b2"]


def _logits(c: Classifier, x):
    p = c.params
    dim = c.image_size * c.image_size
    single = getattr(x, "ndim", None) == 1
    xx = x.reshape(1, -1) if single and isinstance(x, Tensor) else (
        np.reshape(x, (1, -1)) if single else x)
    xd = xx.data if isinstance(xx, Tensor) else np.asarray(xx)
    if xd.shape[1] != dim:
        raise ValueError(f"classify: expected image dim {dim}, got {xd.shape[1]}")
    h = tanh(matmul(xx, p["w1"]) + p["b1"])
    h = tanh(matmul(h, p["w2"]) + p["b2"])
    out = matmul(h, p["w_out"]) + p["b_out"]
    return out, single


def classify(c: Classifier, image):
    """Probability vector over the classes, (C,) or (batch, C)."""
    z, single = _logits(c, image)
    zd = z.data if isinstance(z, Tensor) else z
    shift = np.max(zd, axis=1, keepdims=True)  # detached: exactness-preserving
    ez = exp(z - shift)
    probs = ez / tsum(ez, axis=1, keepdims=True)
    return probs.reshape(-1) if single else probs


def class_log_prob(c: Classifier, image, target: int,
                   floor: float = 1e-6, ceiling: float = 1.0 - 1e-6):
    """(log p clamped to [floor, ceiling], raw p) for one image and class.

    The clamp guards the log against saturated classifiers; the returned
    probability is the raw softmax value.
    """
    if not (0 <= target < c.n_classes):
        raise ValueError(f"unknown class label {target} (have {c.n_classes})")
    probs = classify(c, image)
    pick = np.zeros(c.n_classes)
    pick[target] = 1.0
    p_t = tsum(probs * pick)
    raw = float(p_t.data) if isinstance(p_t, Tensor) else float(p_t)
    return log(clip(p_t, floor, ceiling)), raw


def _sgd_step(params: dict[str, Tensor], lr: float) -> None:
    for tensor in params.values():
        if tensor.grad is not None:
            tensor.data -= lr * tensor.grad
        tensor.zero_grad()


def train_denoiser(dataset, schedule, *, cond_drop_prob: float = 0.1,
                   epochs: int = 60, lr: float = 1e-3, batch_size: int = 64,
                   seed: int = 0, contours=None, n_styles: int = N_STYLES,
                   hidden: int = _HIDDEN) -> tuple[Denoiser, list[float]]:
    """Fit the noise-prediction objective on a synthetic dataset's train split.

    The class id is replaced by the null row with probability
    ``cond_drop_prob``, and the contour branch is dropped with the same
    probability, independently.  Returns the model and per-epoch mean loss.
    """
    if not (0.0 <= cond_drop_prob <= 1.0):
        raise TrainingError(f"cond_drop_prob must be in [0,1], got {cond_drop_prob}")
    rng = np.random.default_rng(seed)
    idx = np.asarray(dataset.splits["train"])
    x0 = np.stack([to_model_space(dataset.images[i]) for i in idx])
    labels = np.asarray(dataset.labels)[idx]
    if contours is None:
        from higfa.contour import canny

        contours = [canny(dataset.images[i]).bits for i in idx]
    edges = np.stack([np.asarray(e).reshape(-1).astype(np.float64) for e in contours])

    model = Denoiser.create(int(np.max(dataset.labels)) + 1, seed=seed + 1,
                            image_size=dataset.images[0].shape[0],
                            n_styles=n_styles, hidden=hidden, t_max=schedule.t_train)
    n = len(idx)
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            take = order[start:start + batch_size]
            xb = x0[take]
            t = rng.integers(0, schedule.t_train, size=len(take))
            eps = rng.normal(size=xb.shape)
            ab = schedule.alpha_bars[t][:, None]
            x_t = np.sqrt(ab) * xb + np.sqrt(1.0 - ab) * eps

            drop_y = rng.random(len(take)) < cond_drop_prob
            keep_e = (rng.random(len(take)) >= cond_drop_prob).astype(np.float64)
            ids = labels[take].copy()
            ids[drop_y] = model.null_class()
            conds = [Conditioning(None if dy else int(i), int(s))
                     for i, dy, s in zip(ids, drop_y, rng.integers(0, n_styles, len(take)))]

            pred = denoise(model, Tensor(x_t), t, conds,
                           contour=edges[take], s_ctl=1.0, contour_keep=keep_e)
            diff = pred - eps
            loss = tsum(diff * diff) * (1.0 / diff.size)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise TrainingError(f"non-finite denoiser loss at epoch {epoch}")
            backward(loss)
            _sgd_step(model.params, lr)
            epoch_loss += lv * len(take)
        losses.append(epoch_loss / n)
        log_.debug("denoiser epoch %d loss %.6f", epoch, losses[-1])
    return model, losses


def train_classifier(dataset, *, epochs: int = 80, lr: float = 1e-3,
                     batch_size: int = 64, seed: int = 0,
                     k_shot: int | None = None,
                     image_size: int | None = None) -> tuple[Classifier, float]:
    """Cross-entropy training on the train split; returns (model, val accuracy).

    ``k_shot`` restricts training to the first k train images per class.
    """
    n_classes = int(np.max(dataset.labels)) + 1
    if n_classes < 2:
        raise TrainingError("dataset must have at least 2 classes")
    rng = np.random.default_rng(seed)
    idx = np.asarray(dataset.splits["train"])
    labels_all = np.asarray(dataset.labels)
    if k_shot is not None:
        keep = []
        for cls_id in range(n_classes):
            keep.extend([i for i in idx if labels_all[i] == cls_id][:k_shot])
        idx = np.asarray(keep)
    x = np.stack([to_model_space(dataset.images[i]) for i in idx])
    y = labels_all[idx]
    side = image_size or dataset.images[0].shape[0]
    model = Classifier.create(n_classes, seed=seed + 1, image_size=side)
    _train_classifier_arrays(model, x, y, epochs=epochs, lr=lr,
                             batch_size=batch_size, rng=rng)
    val = dataset.splits.get("val")
    acc = evaluate_classifier(model, dataset, "val") if val is not None and len(val) else float("nan")
    log_.info("classifier val accuracy %.3f", acc)
    return model, acc


def _train_classifier_arrays(model: Classifier, x: np.ndarray, y: np.ndarray, *,
                             epochs: int, lr: float, batch_size: int,
                             rng: np.random.Generator) -> None:
    n = len(x)
    onehot = np.zeros((n, model.n_classes))
    onehot[np.arange(n), y] = 1.0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            take = order[start:start + batch_size]
            z, _ = _logits(model, Tensor(x[take]))
            shift = np.max(z.data, axis=1, keepdims=True)
            zs = z - shift
            logp = zs - log(tsum(exp(zs), axis=1, keepdims=True))
            loss = tsum(logp * onehot[take]) * (-1.0 / len(take))
            if not np.isfinite(float(loss.data)):
                raise TrainingError(f"non-finite classifier loss at epoch {epoch}")
            backward(loss)
            _sgd_step(model.params, lr)


def train_classifier_on_arrays(images: np.ndarray, labels: np.ndarray, *,
                               n_classes: int, epochs: int = 80, lr: float = 1e-3,
                               batch_size: int = 64, seed: int = 0,
                               image_size: int = IMAGE_SIZE) -> Classifier:
    """Train directly on (uint8 image, label) pairs, e.g. a mixed train set."""
    if n_classes < 2:
        raise TrainingError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    x = np.stack([to_model_space(im) for im in images])
    model = Classifier.create(n_classes, seed=seed + 1, image_size=image_size)
    _train_classifier_arrays(model, x, np.asarray(labels), epochs=epochs, lr=lr,
                             batch_size=batch_size, rng=rng)
    return model


def evaluate_classifier(model: Classifier, dataset, split: str = "test") -> float:
    idx = np.asarray(dataset.splits[split])
    x = np.stack([to_model_space(dataset.images[i]) for i in idx])
    pred = np.argmax(classify(model.frozen(), x), axis=1)
    return float(np.mean(pred == np.asarray(dataset.labels)[idx]))


def accuracy_on_arrays(model: Classifier, images, labels) -> float:
    x = np.stack([to_model_space(im) for im in images])
    pred = np.argmax(classify(model.frozen(), x), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# --- weight files ---------------------------------------------------------


def save_weights(path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                         dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += b"".join(struct.pack("<Q", e) for e in arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", raw, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def save_denoiser(path, d: Denoiser) -> None:
    meta = np.array([d.image_size, d.n_classes, d.n_styles, d.hidden,
                     d.temb_dim, d.t_max], dtype=np.float64)
    save_weights(path, {"meta": meta, **d.params})


def load_denoiser(path) -> Denoiser:
    data = load_weights(path)
    meta = data.pop("meta")
    params = {k: Tensor(v, requires_grad=True) for k, v in data.items()}
    size, n_classes, n_styles, hidden, temb, t_max = (int(v) for v in meta)
    return Denoiser(params=params, n_classes=n_classes, image_size=size,
                    n_styles=n_styles, hidden=hidden, temb_dim=temb, t_max=t_max)


def save_classifier(path, c: Classifier) -> None:
    meta = np.array([c.image_size, c.n_classes, c.hidden], dtype=np.float64)
    save_weights(path, {"meta": meta, **c.params})


def load_classifier(path) -> Classifier:
    data = load_weights(path)
    meta = data.pop("meta")
    params = {k: Tensor(v, requires_grad=True) for k, v in data.items()}
    size, n_classes, hidden = (int(v) for v in meta)
    return Classifier(params=params, n_classes=n_classes, image_size=size, hidden=hidden)
