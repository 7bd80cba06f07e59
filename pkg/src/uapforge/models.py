"""Small classifier models: definition, seeded init, ERM training, checkpoints.

A model is a list of LayerSpec entries plus one flat parameter vector. The
forward graph is rebuilt per call on the autodiff tape, which keeps parameter
overrides (the attack's theta-star) and shared perturbations cheap to express.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import GradResult, Var
from .errors import TrainingDiverged
from .tensor import array_fingerprint, fnv1a_64, load_tensor, require_finite, save_tensor

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2", "flatten", "normalize")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    bias: bool = True
    mean: tuple = ()
    std: tuple = ()

    def to_dict(self):
        d = {"kind": self.kind}
        for key in ("in_features", "out_features", "in_channels", "out_channels", "kernel"):
            if getattr(self, key):
                d[key] = getattr(self, key)
        if not self.bias:
            d["bias"] = False
        if self.kind == "normalize":
            d["mean"] = list(self.mean)
            d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = dict(d)
        if "mean" in kw:
            kw["mean"] = tuple(kw["mean"])
        if "std" in kw:
            kw["std"] = tuple(kw["std"])
        return cls(**kw)


def dense(n_in, n_out, bias=True):
    return LayerSpec("dense", in_features=n_in, out_features=n_out, bias=bias)


def conv2d(c_in, c_out, kernel):
    return LayerSpec("conv2d", in_channels=c_in, out_channels=c_out, kernel=kernel)


def relu():
    return LayerSpec("relu")


def maxpool2():
    return LayerSpec("maxpool2")


def flatten():
    return LayerSpec("flatten")


def normalize(mean, std):
    mean = tuple(float(m) for m in np.atleast_1d(mean))
    std = tuple(float(s) for s in np.atleast_1d(std))
    if any(s <= 0 for s in std):
        raise ValueError("normalize std must be positive")
    return LayerSpec("normalize", mean=mean, std=std)


def infer_shapes(spec, input_shape):
    """Walk the layer list and return the per-layer output shapes.

    Raises ValueError if adjacent layers do not compose.
    """
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(spec):
        if layer.kind == "dense":
            if shape != (layer.in_features,):
                raise ValueError(f"layer {i} (dense) expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ValueError(f"layer {i} (conv2d) expects ({layer.in_channels}, H, W), got {shape}")
            c, h, w = shape
            k = layer.kernel
            if h < k or w < k:
                raise ValueError(f"layer {i} (conv2d) kernel {k} larger than input {h}x{w}")
            shape = (layer.out_channels, h - k + 1, w - k + 1)
        elif layer.kind == "relu":
            pass
        elif layer.kind == "maxpool2":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ValueError(f"layer {i} (maxpool2) needs a [C, H>=2, W>=2] input, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "normalize":
            if len(shape) != 3 or len(layer.mean) != shape[0] or len(layer.std) != shape[0]:
                raise ValueError(f"layer {i} (normalize) constants do not match {shape}")
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        shapes.append(shape)
    return shapes


def _param_layout(spec):
    """[(offset, shape)] for every weight/bias array, in layer order."""
    layout = []
    offset = 0
    for layer in spec:
        if layer.kind == "dense":
            shapes = [(layer.in_features, layer.out_features)]
            if layer.bias:
                shapes.append((layer.out_features,))
            for shape in shapes:
                layout.append((offset, shape))
                offset += int(np.prod(shape))
        elif layer.kind == "conv2d":
            k = layer.kernel
            for shape in ((layer.out_channels, layer.in_channels, k, k), (layer.out_channels,)):
                layout.append((offset, shape))
                offset += int(np.prod(shape))
    return layout, offset


def param_count(spec):
    return _param_layout(spec)[1]


@dataclass
class ModelState:
    """Layer list plus one flat parameter vector."""

    spec: tuple
    params: np.ndarray
    input_shape: tuple
    num_classes: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        expected = param_count(self.spec)
        if self.params.shape != (expected,):
            raise ValueError(f"params length {self.params.shape} != spec count ({expected},)")

    @property
    def dtype(self):
        return self.params.dtype

    def with_params(self, theta):
        """Same architecture, different flat parameter vector.

        The new model adopts `theta`'s dtype, so a float64 vector yields a
        float64-compute model (used for exact neighborhood accounting).
        """
        return replace(self, params=np.asarray(theta), history=[])

    def fingerprint(self):
        spec_blob = json.dumps([l.to_dict() for l in self.spec], sort_keys=True).encode()
        return f"{fnv1a_64(spec_blob + np.ascontiguousarray(self.params).tobytes()):016x}"

    # -- the interface the attack and evaluation drive ------------------

    def flat_params(self):
        return self.params

    def logits(self, X, theta=None):
        X = self._check_input(X)
        pvars = self._param_vars(theta)
        return self._forward(ad.leaf(X), pvars).value

    def predict(self, X, chunk=1024):
        """Per-sample argmax of logits; ties go to the lowest class index."""
        X = self._check_input(X)
        out = np.empty(X.shape[0], dtype=np.int64)
        for start in range(0, X.shape[0], chunk):
            out[start : start + chunk] = np.argmax(self.logits(X[start : start + chunk]), axis=1)
        return out

    def loss(self, X, Y, delta=None, theta=None):
        loss_var, _ = self._loss_graph(X, Y, delta=delta, theta=theta)
        return float(loss_var.value)

    def loss_grad(self, X, Y, wrt, delta=None, theta=None, reduction="mean"):
        """Loss and its gradient w.r.t. one quantity.

        wrt "parameters" -> flat vector matching params; "input" -> same shape
        as X; "perturbation" -> same shape as delta (summed over the batch).
        """
        loss_var, nodes = self._loss_graph(X, Y, delta=delta, theta=theta, reduction=reduction)
        loss = float(loss_var.value)
        if not np.isfinite(loss):
            raise ValueError("non-finite loss")
        ad.backward(loss_var)
        if wrt == "parameters":
            grad = self._collect_param_grad(nodes["params"])
        elif wrt == "input":
            grad = nodes["input"].grad
            if grad is None:
                grad = np.zeros_like(nodes["input"].value)
        elif wrt == "perturbation":
            if nodes["delta"] is None:
                raise ValueError("no perturbation in this graph; pass delta")
            grad = nodes["delta"].grad
            if grad is None:
                grad = np.zeros_like(nodes["delta"].value)
        else:
            raise ValueError(f"unsupported wrt target {wrt!r}")
        require_finite(grad, "gradient")
        return loss, grad

    # -- graph construction ---------------------------------------------

    def _check_input(self, X):
        X = np.asarray(X, dtype=self.params.dtype)
        if X.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {X.shape[1:]} != model input {self.input_shape}")
        require_finite(X, "model input")
        return X

    def _param_vars(self, theta=None):
        theta = self.params if theta is None else np.asarray(theta, dtype=self.params.dtype)
        layout, total = _param_layout(self.spec)
        if theta.shape != (total,):
            raise ValueError(f"theta length {theta.shape} != ({total},)")
        return [Var(theta[o : o + int(np.prod(s))].reshape(s)) for o, s in layout]

    def _forward(self, x_var, pvars):
        h = x_var
        it = iter(pvars)
        for layer in self.spec:
            if layer.kind == "dense":
                h = ad.matmul(h, next(it))
                if layer.bias:
                    h = ad.add(h, next(it))
            elif layer.kind == "conv2d":
                h = ad.conv2d(h, next(it), next(it))
            elif layer.kind == "relu":
                h = ad.relu(h)
            elif layer.kind == "maxpool2":
                h = ad.maxpool2(h)
            elif layer.kind == "flatten":
                h = ad.flatten(h)
            elif layer.kind == "normalize":
                h = ad.normalize(h, layer.mean, layer.std)
        return h

    def _loss_graph(self, X, Y, delta=None, theta=None, reduction="mean"):
        X = self._check_input(X)
        Y = np.asarray(Y)
        if Y.shape != (X.shape[0],):
            raise ValueError(f"labels shape {Y.shape} != batch ({X.shape[0]},)")
        x_var = ad.leaf(X)
        delta_var = None
        inp = x_var
        if delta is not None:
            delta_var = ad.leaf(np.asarray(delta, dtype=self.params.dtype))
            inp = ad.add(x_var, delta_var)
        pvars = self._param_vars(theta)
        logits = self._forward(inp, pvars)
        loss_var = ad.softmax_cross_entropy(logits, Y, reduction=reduction)
        return loss_var, {"input": x_var, "delta": delta_var, "params": pvars}

    def _collect_param_grad(self, pvars):
        layout, total = _param_layout(self.spec)
        grad = np.zeros(total, dtype=self.params.dtype)
        for (offset, shape), pv in zip(layout, pvars):
            if pv.grad is not None:
                grad[offset : offset + int(np.prod(shape))] = pv.grad.reshape(-1)
        return grad


def build_model(spec, input_shape, seed=0, dtype=np.float32):
    """Initialize a model with seeded uniform fan-in scaling.

    Weights and biases of each layer are drawn from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)); identical (spec, seed) always yields identical params.
    """
    spec = tuple(spec)
    shapes = infer_shapes(spec, input_shape)
    if len(shapes[-1]) != 1:
        raise ValueError(f"model output must be a logit vector, got shape {shapes[-1]}")
    rng = np.random.default_rng(seed)
    layout, total = _param_layout(spec)
    params = np.empty(total, dtype=np.float64)
    i = 0
    for layer in spec:
        if layer.kind == "dense":
            fan_in = layer.in_features
            arrays = 2 if layer.bias else 1
        elif layer.kind == "conv2d":
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            arrays = 2
        else:
            continue
        bound = 1.0 / np.sqrt(fan_in)
        for _ in range(arrays):  # weight, then bias when present
            offset, shape = layout[i]
            n = int(np.prod(shape))
            params[offset : offset + n] = rng.uniform(-bound, bound, size=n)
            i += 1
    return ModelState(
        spec=spec,
        params=params.astype(dtype),
        input_shape=tuple(input_shape),
        num_classes=shapes[-1][0],
    )


def forward_cross_entropy(model, X, Y):
    """Mean softmax-cross-entropy of the batch under the model."""
    return model.loss(X, Y)


def backward(model, X, Y, wrt, delta=None, theta=None):
    """Gradient of the mean batch loss w.r.t. parameters, input, or perturbation."""
    loss, grad = model.loss_grad(X, Y, wrt, delta=delta, theta=theta)
    return GradResult(wrt=wrt, grad=grad, loss=loss)


def predict(model, X):
    return model.predict(X)


def param_distance(a, b):
    """Euclidean norm of the parameter difference; specs must match."""
    if a.spec != b.spec:
        raise ValueError("param_distance requires identical layer specs")
    return float(np.linalg.norm(a.params.astype(np.float64) - b.params.astype(np.float64)))


def train_erm(model, dataset, epochs, lr, batch, seed=0):
    """Mini-batch gradient descent on the mean cross-entropy.

    Returns a new ModelState; the input model is untouched. `history` on the
    result records (epoch, mean batch loss, train accuracy) per epoch.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if dataset.labels is None:
        raise ValueError("training requires ground-truth labels")
    X, Y = dataset.images, dataset.labels
    if Y.min() < 0 or Y.max() >= model.num_classes:
        raise ValueError("dataset labels outside the model's class range")
    theta = model.params.copy()
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng(seed ^ epoch).permutation(X.shape[0])
        losses = []
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            try:
                loss, grad = model.loss_grad(X[idx], Y[idx], "parameters", theta=theta)
            except ValueError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch + 1}: {exc}") from exc
            theta = theta - lr * grad
            losses.append(loss)
        trained = model.with_params(theta)
        acc = float(np.mean(trained.predict(X) == Y))
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "accuracy": acc})
    out = model.with_params(theta)
    out.history = history
    return out


# -- ensembles -----------------------------------------------------------


@dataclass
class Ensemble:
    """Several models attacked through their averaged cross-entropy loss."""

    models: tuple

    def __post_init__(self):
        if not self.models:
            raise ValueError("empty model list")
        first = self.models[0]
        for m in self.models[1:]:
            if m.input_shape != first.input_shape or m.num_classes != first.num_classes:
                raise ValueError("ensemble members must share input shape and class count")
        self.models = tuple(self.models)

    @property
    def input_shape(self):
        return self.models[0].input_shape

    @property
    def num_classes(self):
        return self.models[0].num_classes

    @property
    def dtype(self):
        return self.models[0].params.dtype

    def fingerprint(self):
        return f"{fnv1a_64('|'.join(m.fingerprint() for m in self.models).encode()):016x}"

    def flat_params(self):
        return np.concatenate([m.params for m in self.models])

    def with_params(self, theta):
        theta = np.asarray(theta)
        parts, offset = [], 0
        for m in self.models:
            n = m.params.size
            parts.append(m.with_params(theta[offset : offset + n]))
            offset += n
        if offset != theta.size:
            raise ValueError(f"theta length {theta.size} != ensemble count {offset}")
        return Ensemble(tuple(parts))

    def logits(self, X):
        """Averaged member logits (the ensemble's joint prediction)."""
        out = self.models[0].logits(X).astype(np.float64)
        for m in self.models[1:]:
            out += m.logits(X)
        return out / len(self.models)

    def predict(self, X, chunk=1024):
        X = np.asarray(X, dtype=self.dtype)
        out = np.empty(X.shape[0], dtype=np.int64)
        for start in range(0, X.shape[0], chunk):
            out[start : start + chunk] = np.argmax(self.logits(X[start : start + chunk]), axis=1)
        return out

    def _loss_graph(self, X, Y, delta=None, theta=None, reduction="mean"):
        X = np.asarray(X, dtype=self.dtype)
        x_var = ad.leaf(X)
        delta_var = None
        inp = x_var
        if delta is not None:
            delta_var = ad.leaf(np.asarray(delta, dtype=self.dtype))
            inp = ad.add(x_var, delta_var)
        thetas = [None] * len(self.models)
        if theta is not None:
            theta = np.asarray(theta)
            offset = 0
            for i, m in enumerate(self.models):
                thetas[i] = theta[offset : offset + m.params.size]
                offset += m.params.size
        all_pvars, terms = [], []
        for m, th in zip(self.models, thetas):
            m._check_input(X)
            pvars = m._param_vars(th)
            logits = m._forward(inp, pvars)
            terms.append(ad.softmax_cross_entropy(logits, Y, reduction=reduction))
            all_pvars.append(pvars)
        loss_var = ad.add_scalars(terms, [1.0 / len(terms)] * len(terms))
        return loss_var, {"input": x_var, "delta": delta_var, "params": all_pvars}

    def loss(self, X, Y, delta=None, theta=None):
        loss_var, _ = self._loss_graph(X, Y, delta=delta, theta=theta)
        return float(loss_var.value)

    def loss_grad(self, X, Y, wrt, delta=None, theta=None, reduction="mean"):
        loss_var, nodes = self._loss_graph(X, Y, delta=delta, theta=theta, reduction=reduction)
        loss = float(loss_var.value)
        if not np.isfinite(loss):
            raise ValueError("non-finite loss")
        ad.backward(loss_var)
        if wrt == "parameters":
            grad = np.concatenate(
                [m._collect_param_grad(pv) for m, pv in zip(self.models, nodes["params"])]
            )
        elif wrt == "input":
            grad = nodes["input"].grad
        elif wrt == "perturbation":
            if nodes["delta"] is None:
                raise ValueError("no perturbation in this graph; pass delta")
            grad = nodes["delta"].grad
        else:
            raise ValueError(f"unsupported wrt target {wrt!r}")
        require_finite(grad, "gradient")
        return loss, grad


def ensemble_loss(models, X, Y, delta=None):
    """Arithmetic mean of the members' cross-entropy losses."""
    return Ensemble(tuple(models)).loss(X, Y, delta=delta)


def ensemble_backward(models, X, Y, wrt, delta=None):
    ens = Ensemble(tuple(models))
    loss, grad = ens.loss_grad(X, Y, wrt, delta=delta)
    return GradResult(wrt=wrt, grad=grad, loss=loss)


def as_attack_target(model_or_models):
    """Normalize a single model or a list into one attackable object."""
    if isinstance(model_or_models, (ModelState, Ensemble)):
        return model_or_models
    models = tuple(model_or_models)
    return models[0] if len(models) == 1 else Ensemble(models)


def make_architecture(name, input_shape, num_classes, hidden=32):
    """Layer list for one of the named small architectures.

    "linear" and "mlp" flatten image inputs; "cnn_small" is two conv/pool
    stages followed by a two-layer head.
    """
    input_shape = tuple(input_shape)
    image = len(input_shape) == 3
    flat = int(np.prod(input_shape))
    if name == "linear":
        spec = ([flatten()] if image else []) + [dense(flat, num_classes)]
    elif name == "mlp":
        spec = ([flatten()] if image else []) + [dense(flat, hidden), relu(), dense(hidden, num_classes)]
    elif name == "cnn_small":
        if not image:
            raise ValueError("cnn_small needs a [C, H, W] input shape")
        c = input_shape[0]
        # centering [0,1] pixels keeps plain SGD well conditioned
        spec = [normalize([0.5] * c, [0.5] * c),
                conv2d(c, 8, 3), relu(), maxpool2(), conv2d(8, 16, 3), relu(), maxpool2(), flatten()]
        head_in = int(np.prod(infer_shapes(spec, input_shape)[-1]))
        spec += [dense(head_in, hidden), relu(), dense(hidden, num_classes)]
    else:
        raise ValueError(f"unknown architecture {name!r}")
    infer_shapes(spec, input_shape)
    return spec


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(model, path, extra=None):
    """Write params to `<path>` (tensor container) and a JSON sidecar beside it."""
    path = str(path)
    save_tensor(path, model.params)
    meta = {
        "spec": [l.to_dict() for l in model.spec],
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "dtype": str(model.params.dtype),
        "params_fingerprint": array_fingerprint(model.params),
        "history": model.history,
    }
    if extra:
        meta.update(extra)
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_checkpoint(path):
    path = str(path)
    params = load_tensor(path)
    with open(path + ".json") as f:
        meta = json.load(f)
    spec = tuple(LayerSpec.from_dict(d) for d in meta["spec"])
    model = ModelState(
        spec=spec,
        params=params,
        input_shape=tuple(meta["input_shape"]),
        num_classes=meta["num_classes"],
    )
    return model, meta
