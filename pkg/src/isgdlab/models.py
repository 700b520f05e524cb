"""Small classifiers with hand-written backprop.

Two architectures: a configurable fully-connected net (``Mlp``) and a fixed
two-conv-layer net for 28x28 single-channel images (``ConvNet``). Both keep
all parameters in one flat float64 vector; layer tensors are views into it,
laid out layer by layer in declaration order, weights before biases,
row-major within a tensor. Outputs are log-probabilities.

Per-sample gradients are first-class: ``per_sample_gradients`` returns one
flat gradient row per input, and ``grad_table`` sweeps a whole dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stable under large logits."""
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_loss(log_probs, y: int) -> float:
    """Negative log-likelihood -log_probs[y] for one log-probability vector."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 1:
        raise ValueError(f"expected a 1-D log-probability vector, got shape {lp.shape}")
    y = int(y)
    if not 0 <= y < lp.size:
        raise ValueError(f"class index {y} out of range for {lp.size} classes")
    return float(-lp[y])


def _relu(z):
    return np.maximum(z, 0.0)


def _check_labels(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    return y.astype(np.intp)


class _FlatParamModel:
    """Shared plumbing: flat parameter vector plus per-layer views."""

    # subclasses fill these in __init__
    tag: str
    n_classes: int

    def _allocate(self, shapes: list[tuple[int, ...]], rng: np.random.Generator | None):
        """Build the flat vector and per-tensor views; init uniform in
        +-1/sqrt(fan_in) per layer (weight and its bias share the bound)."""
        sizes = [int(np.prod(s)) for s in shapes]
        self._shapes = shapes
        self._offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.params = np.zeros(int(self._offsets[-1]), dtype=np.float64)
        self._views = [
            self.params[self._offsets[k] : self._offsets[k + 1]].reshape(shapes[k])
            for k in range(len(shapes))
        ]
        if rng is not None:
            # shapes come in (weight, bias) pairs
            for k in range(0, len(shapes), 2):
                w = self._views[k]
                fan_in = int(np.prod(w.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                w[...] = rng.uniform(-bound, bound, size=w.shape)
                self._views[k + 1][...] = rng.uniform(-bound, bound, size=shapes[k + 1])

    @property
    def n_params(self) -> int:
        return self.params.size

    def set_params(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.params.shape:
            raise ValueError(
                f"expected {self.params.size} parameters, got shape {values.shape}"
            )
        self.params[...] = values

    def _grad_views(self, buf: np.ndarray) -> list[np.ndarray]:
        """Views into one flat gradient row (or [n, P] batch) mirroring the
        parameter layout; buf's trailing axis must have n_params entries."""
        lead = buf.shape[:-1]
        return [
            buf[..., self._offsets[k] : self._offsets[k + 1]].reshape(lead + self._shapes[k])
            for k in range(len(self._shapes))
        ]

    # ---- conveniences shared by both architectures ----

    def forward(self, x) -> np.ndarray:
        """Log-probabilities for a single input."""
        return self.forward_batch(np.asarray(x, dtype=np.float64)[None, ...])[0]

    def loss_batch(self, X, Y) -> np.ndarray:
        """Per-sample negative log-likelihoods."""
        Y = _check_labels(Y, self.n_classes)
        lp = self.forward_batch(X)
        return -lp[np.arange(lp.shape[0]), Y]

    def mean_loss(self, X, Y) -> float:
        return float(self.loss_batch(X, Y).mean())

    def accuracy(self, X, Y) -> float:
        Y = _check_labels(Y, self.n_classes)
        pred = self.forward_batch(X).argmax(axis=1)
        return float((pred == Y).mean())

    def gradient(self, X, Y) -> np.ndarray:
        """Gradient of the mean loss over the batch, flat [n_params]."""
        g = self.per_sample_gradients(X, Y)
        return g.mean(axis=0)

    def per_sample_gradient(self, x, y) -> np.ndarray:
        """Flat gradient of the loss on one (input, label) pair."""
        return self.per_sample_gradients(
            np.asarray(x, dtype=np.float64)[None, ...], np.asarray([y])
        )[0]


class Mlp(_FlatParamModel):
    """Fully-connected net: linear layers with ReLU between them, log-softmax
    on the last layer's logits."""

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        self.layer_sizes = sizes
        self.n_classes = sizes[-1]
        self.tag = "mlp:" + "-".join(str(s) for s in sizes)
        shapes: list[tuple[int, ...]] = []
        for d_in, d_out in zip(sizes, sizes[1:]):
            shapes.append((d_out, d_in))
            shapes.append((d_out,))
        self._allocate(shapes, rng)

    def _flatten_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim < 2:
            raise ValueError("expected a batch: leading axis indexes samples")
        flat = X.reshape(X.shape[0], -1)
        if flat.shape[1] != self.layer_sizes[0]:
            raise ValueError(
                f"input has {flat.shape[1]} features, model expects {self.layer_sizes[0]}"
            )
        return flat

    def _forward_trace(self, X):
        A = self._flatten_input(X)
        acts = [A]
        zs = []
        n_layers = len(self.layer_sizes) - 1
        for l in range(n_layers):
            W, b = self._views[2 * l], self._views[2 * l + 1]
            Z = A @ W.T + b
            zs.append(Z)
            A = _relu(Z) if l < n_layers - 1 else Z
            acts.append(A)
        return acts, zs

    def forward_batch(self, X) -> np.ndarray:
        _, zs = self._forward_trace(X)
        return log_softmax(zs[-1])

    def per_sample_gradients(self, X, Y, out: np.ndarray | None = None) -> np.ndarray:
        Y = _check_labels(Y, self.n_classes)
        acts, zs = self._forward_trace(X)
        n = acts[0].shape[0]
        if Y.size != n:
            raise ValueError(f"{n} inputs but {Y.size} labels")
        if out is None:
            out = np.empty((n, self.n_params), dtype=np.float64)
        elif out.shape != (n, self.n_params):
            raise ValueError(f"out buffer must have shape {(n, self.n_params)}")
        gviews = self._grad_views(out)
        # d loss_i / d logits = softmax(z_i) - onehot(y_i)
        dZ = np.exp(log_softmax(zs[-1]))
        dZ[np.arange(n), Y] -= 1.0
        for l in range(len(zs) - 1, -1, -1):
            np.einsum("no,ni->noi", dZ, acts[l], out=gviews[2 * l])
            gviews[2 * l + 1][...] = dZ
            if l > 0:
                dZ = (dZ @ self._views[2 * l]) * (zs[l - 1] > 0.0)
        return out

    def per_sample_grad_sq_norms(self, X, Y) -> np.ndarray:
        """Squared gradient norm per sample, without building the gradients.

        The weight block of a linear layer contributes the outer product
        dZ_i (x) A_i, whose squared Frobenius norm factorizes as
        ||dZ_i||^2 ||A_i||^2; the bias block adds ||dZ_i||^2.
        """
        Y = _check_labels(Y, self.n_classes)
        acts, zs = self._forward_trace(X)
        n = acts[0].shape[0]
        if Y.size != n:
            raise ValueError(f"{n} inputs but {Y.size} labels")
        dZ = np.exp(log_softmax(zs[-1]))
        dZ[np.arange(n), Y] -= 1.0
        sq = np.zeros(n, dtype=np.float64)
        for l in range(len(zs) - 1, -1, -1):
            dz_sq = (dZ * dZ).sum(axis=1)
            sq += dz_sq * (acts[l] * acts[l]).sum(axis=1) + dz_sq
            if l > 0:
                dZ = (dZ @ self._views[2 * l]) * (zs[l - 1] > 0.0)
        return sq


def _im2col(X: np.ndarray, k: int):
    """[n, C, H, W] -> patch matrix [n, OH*OW, C*k*k] (valid windows, stride 1)."""
    v = np.lib.stride_tricks.sliding_window_view(X, (k, k), axis=(2, 3))
    n, C, OH, OW = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n, OH * OW, C * k * k)
    return np.ascontiguousarray(cols), OH, OW


def _col2im(dcols: np.ndarray, C: int, H: int, W: int, k: int, OH: int, OW: int):
    """Adjoint of _im2col: scatter-add patch gradients back onto the image."""
    n = dcols.shape[0]
    d = dcols.reshape(n, OH, OW, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    dX = np.zeros((n, C, H, W), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            dX[:, :, ki : ki + OH, kj : kj + OW] += d[:, :, :, :, ki, kj]
    return dX


class ConvNet(_FlatParamModel):
    """Fixed net for 28x28 single-channel images, two classes.

    conv 1->5 (k=5, stride 1, no padding), ReLU,
    conv 5->10 (k=5), ReLU, flatten to 4000,
    fc 4000->100, ReLU, fc 100->2, log-softmax.
    401692 parameters.
    """

    IMAGE_SHAPE = (28, 28)
    K = 5

    def __init__(self, rng: np.random.Generator | None = None):
        self.n_classes = 2
        self.tag = "convnet"
        shapes = [
            (5, 1, 5, 5), (5,),        # conv1
            (10, 5, 5, 5), (10,),      # conv2
            (100, 4000), (100,),       # fc1
            (2, 100), (2,),            # fc2
        ]
        self._allocate(shapes, rng)

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3 and X.shape[1:] == self.IMAGE_SHAPE:
            X = X[:, None, :, :]
        if X.ndim != 4 or X.shape[1:] != (1, *self.IMAGE_SHAPE):
            raise ValueError(
                f"expected [n, 28, 28] or [n, 1, 28, 28] images, got shape {X.shape}"
            )
        return X

    def _forward_trace(self, X):
        X = self._check_input(X)
        n = X.shape[0]
        Wc1, bc1, Wc2, bc2, Wf1, bf1, Wf2, bf2 = self._views
        k = self.K

        cols1, oh1, ow1 = _im2col(X, k)                        # [n, 576, 25]
        Z1 = cols1 @ Wc1.reshape(5, -1).T + bc1                # [n, 576, 5]
        A1 = _relu(Z1)
        A1img = A1.reshape(n, oh1, ow1, 5).transpose(0, 3, 1, 2)

        cols2, oh2, ow2 = _im2col(A1img, k)                    # [n, 400, 125]
        Z2 = cols2 @ Wc2.reshape(10, -1).T + bc2               # [n, 400, 10]
        A2 = _relu(Z2)
        # flatten channel-major to match the fc1 weight layout
        Aflat = A2.reshape(n, oh2, ow2, 10).transpose(0, 3, 1, 2).reshape(n, 4000)

        Z3 = Aflat @ Wf1.T + bf1                               # [n, 100]
        A3 = _relu(Z3)
        Z4 = A3 @ Wf2.T + bf2                                  # [n, 2]
        trace = dict(
            cols1=cols1, Z1=Z1, oh1=oh1, ow1=ow1,
            cols2=cols2, Z2=Z2, oh2=oh2, ow2=ow2,
            Aflat=Aflat, Z3=Z3, A3=A3, Z4=Z4, n=n,
        )
        return trace

    def forward_batch(self, X) -> np.ndarray:
        return log_softmax(self._forward_trace(X)["Z4"])

    def per_sample_gradients(self, X, Y, out: np.ndarray | None = None) -> np.ndarray:
        Y = _check_labels(Y, self.n_classes)
        t = self._forward_trace(X)
        n = t["n"]
        if Y.size != n:
            raise ValueError(f"{n} inputs but {Y.size} labels")
        if out is None:
            out = np.empty((n, self.n_params), dtype=np.float64)
        elif out.shape != (n, self.n_params):
            raise ValueError(f"out buffer must have shape {(n, self.n_params)}")
        gWc1, gbc1, gWc2, gbc2, gWf1, gbf1, gWf2, gbf2 = self._grad_views(out)
        Wc1, bc1, Wc2, bc2, Wf1, bf1, Wf2, bf2 = self._views
        k = self.K

        dZ4 = np.exp(log_softmax(t["Z4"]))
        dZ4[np.arange(n), Y] -= 1.0
        np.einsum("no,ni->noi", dZ4, t["A3"], out=gWf2)
        gbf2[...] = dZ4

        dZ3 = (dZ4 @ Wf2) * (t["Z3"] > 0.0)
        np.einsum("no,ni->noi", dZ3, t["Aflat"], out=gWf1)
        gbf1[...] = dZ3

        dAflat = dZ3 @ Wf1                                     # [n, 4000]
        oh2, ow2 = t["oh2"], t["ow2"]
        dA2 = dAflat.reshape(n, 10, oh2, ow2).transpose(0, 2, 3, 1).reshape(n, oh2 * ow2, 10)
        dZ2 = dA2 * (t["Z2"] > 0.0)
        np.einsum("npo,npk->nok", dZ2, t["cols2"], out=gWc2.reshape(n, 10, -1))
        gbc2[...] = dZ2.sum(axis=1)

        dcols2 = dZ2 @ Wc2.reshape(10, -1)                     # [n, 400, 125]
        oh1, ow1 = t["oh1"], t["ow1"]
        dA1img = _col2im(dcols2, 5, oh1, ow1, k, oh2, ow2)
        dA1 = dA1img.transpose(0, 2, 3, 1).reshape(n, oh1 * ow1, 5)
        dZ1 = dA1 * (t["Z1"] > 0.0)
        np.einsum("npo,npk->nok", dZ1, t["cols1"], out=gWc1.reshape(n, 5, -1))
        gbc1[...] = dZ1.sum(axis=1)
        return out

    def per_sample_grad_sq_norms(self, X, Y) -> np.ndarray:
        """Squared gradient norm per sample, without the big fc blocks.

        The fully connected layers dominate the parameter count, so their
        contribution is computed through the rank-one factorization
        ||dZ_i (x) A_i||^2 = ||dZ_i||^2 ||A_i||^2 instead of materializing
        a [n, n_params] buffer. The small convolution blocks are summed
        directly.
        """
        Y = _check_labels(Y, self.n_classes)
        t = self._forward_trace(X)
        n = t["n"]
        if Y.size != n:
            raise ValueError(f"{n} inputs but {Y.size} labels")
        Wc1, bc1, Wc2, bc2, Wf1, bf1, Wf2, bf2 = self._views
        k = self.K

        dZ4 = np.exp(log_softmax(t["Z4"]))
        dZ4[np.arange(n), Y] -= 1.0
        dz4_sq = (dZ4 * dZ4).sum(axis=1)
        sq = dz4_sq * (t["A3"] * t["A3"]).sum(axis=1) + dz4_sq

        dZ3 = (dZ4 @ Wf2) * (t["Z3"] > 0.0)
        dz3_sq = (dZ3 * dZ3).sum(axis=1)
        sq += dz3_sq * (t["Aflat"] * t["Aflat"]).sum(axis=1) + dz3_sq

        dAflat = dZ3 @ Wf1
        oh2, ow2 = t["oh2"], t["ow2"]
        dA2 = dAflat.reshape(n, 10, oh2, ow2).transpose(0, 2, 3, 1).reshape(n, oh2 * ow2, 10)
        dZ2 = dA2 * (t["Z2"] > 0.0)
        gWc2 = np.einsum("npo,npk->nok", dZ2, t["cols2"])      # [n, 10, 125]
        gbc2 = dZ2.sum(axis=1)
        sq += (gWc2 * gWc2).sum(axis=(1, 2)) + (gbc2 * gbc2).sum(axis=1)

        dcols2 = dZ2 @ Wc2.reshape(10, -1)
        oh1, ow1 = t["oh1"], t["ow1"]
        dA1img = _col2im(dcols2, 5, oh1, ow1, k, oh2, ow2)
        dA1 = dA1img.transpose(0, 2, 3, 1).reshape(n, oh1 * ow1, 5)
        dZ1 = dA1 * (t["Z1"] > 0.0)
        gWc1 = np.einsum("npo,npk->nok", dZ1, t["cols1"])      # [n, 5, 25]
        gbc1 = dZ1.sum(axis=1)
        sq += (gWc1 * gWc1).sum(axis=(1, 2)) + (gbc1 * gbc1).sum(axis=1)
        return sq


@dataclass(frozen=True)
class GradTable:
    """Per-sample gradients at a fixed parameter point.

    grads is [N, n_params] or None when only norms were requested;
    norms[i] is the Euclidean norm of item i's gradient either way.
    """

    grads: np.ndarray | None
    norms: np.ndarray


def grad_table(
    model,
    X,
    Y,
    chunk_size: int = 64,
    store_grads: bool = True,
    out: np.ndarray | None = None,
) -> GradTable:
    """Per-sample gradients (and their norms) over a whole dataset.

    Work proceeds in chunks of chunk_size samples so only one chunk of
    per-sample rows is ever in flight when store_grads is False. Models
    that expose per_sample_grad_sq_norms get their norms through it in
    that mode, skipping the row buffer entirely. Parameters are not
    touched.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    n = X.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if Y.shape[0] != n:
        raise ValueError(f"{n} inputs but {Y.shape[0]} labels")
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    norms = np.empty(n, dtype=np.float64)
    norms_only = getattr(model, "per_sample_grad_sq_norms", None)
    if store_grads:
        if out is None:
            out = np.empty((n, model.n_params), dtype=np.float64)
        elif out.shape != (n, model.n_params):
            raise ValueError(f"out buffer must have shape {(n, model.n_params)}")
        grads = out
        scratch = None
    else:
        grads = None
        if norms_only is None:
            scratch = np.empty((min(chunk_size, n), model.n_params), dtype=np.float64)
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        if store_grads:
            rows = model.per_sample_gradients(X[lo:hi], Y[lo:hi], out=grads[lo:hi])
        elif norms_only is not None:
            norms[lo:hi] = np.sqrt(norms_only(X[lo:hi], Y[lo:hi]))
            continue
        else:
            rows = model.per_sample_gradients(X[lo:hi], Y[lo:hi], out=scratch[: hi - lo])
        norms[lo:hi] = np.linalg.norm(rows, axis=1)
    return GradTable(grads=grads, norms=norms)


def sample_loss(model, x, y) -> float:
    """Loss of the model on a single (input, label) pair."""
    return float(model.loss_batch(np.asarray(x, dtype=np.float64)[None, ...], [y])[0])


def finite_diff_gradient(model, x, y, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central-difference gradient of the single-sample loss.

    coords selects which parameter coordinates to probe (all by default);
    the returned vector has one entry per probed coordinate, in coords
    order. The model's parameters are restored exactly on exit.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    theta = model.params
    if coords is None:
        coords = np.arange(theta.size)
    else:
        coords = np.asarray(coords, dtype=np.intp)
    grad = np.empty(coords.size, dtype=np.float64)
    for j, k in enumerate(coords):
        orig = theta[k]
        theta[k] = orig + h
        up = sample_loss(model, x, y)
        theta[k] = orig - h
        down = sample_loss(model, x, y)
        theta[k] = orig
        grad[j] = (up - down) / (2.0 * h)
    return grad


# ---- parameter checkpointing ----

_PARAM_MAGIC = b"NPRM"


def save_params(model, path) -> None:
    """Write the flat parameter vector with a small self-describing header."""
    tag_bytes = model.tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC)
        fh.write(np.array(len(tag_bytes), dtype="<u4").tobytes())
        fh.write(tag_bytes)
        fh.write(np.array(model.n_params, dtype="<u8").tobytes())
        fh.write(model.params.astype("<f8").tobytes())


def load_params(path):
    """Read a checkpoint written by save_params; returns (tag, params)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _PARAM_MAGIC:
        raise ValueError(f"not a parameter checkpoint: bad magic {blob[:4]!r}")
    tag_len = int(np.frombuffer(blob, dtype="<u4", count=1, offset=4)[0])
    tag = blob[8 : 8 + tag_len].decode("utf-8")
    off = 8 + tag_len
    count = int(np.frombuffer(blob, dtype="<u8", count=1, offset=off)[0])
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=off + 8).astype(np.float64)
    if params.size != count:
        raise ValueError(f"checkpoint truncated: header says {count} parameters")
    return tag, params


def model_from_tag(tag: str, rng: np.random.Generator | None = None):
    """Build a model from its tag string ('convnet' or 'mlp:784-100-2')."""
    if tag == "convnet":
        return ConvNet(rng)
    if tag.startswith("mlp:"):
        sizes = [int(s) for s in tag[4:].split("-")]
        return Mlp(sizes, rng)
    raise ValueError(f"unknown model tag {tag!r}")
