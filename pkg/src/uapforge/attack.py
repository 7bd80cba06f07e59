"""Crafting loop: curriculum schedule, per-batch min-min inner loops, Adam ascent.

Each mini-batch starts from the clean parameters, minimizes the loss over a
rho_t-ball of parameters and an r_t-ball around each sample, and then takes a
single Adam ascent step on the shared perturbation with an l-infinity clamp.
Setting rho or r to zero (or order "none") degrades the loop to the plain
averaged-loss baseline, which is how the ablation variants are expressed.

All budget-carrying quantities (theta-star, optimized samples, the
perturbation itself) are tracked in float64 regardless of the model's compute
dtype, so the ball invariants hold exactly; the clean model's forward runs at
its own precision.
"""

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import minibatches, pseudo_labels
from .errors import CraftingFailed
from .models import as_attack_target
from .optim import ZERO_GRAD_TOL, AdamState, adam_step, normalized_descent_step
from .tensor import fnv1a_64, load_tensor, save_tensor

ORDERS = ("model_first", "data_first", "alternating", "none")

# Reference input dimensionality for the data-ball rescale (3 x 224 x 224).
_REFERENCE_DIM = 3 * 224 * 224

VARIANTS = {
    "dm-uap": {},
    "spgd": {"rho": 0.0, "r": 0.0},
    "optimal-data": {"rho": 0.0},
    "optimal-params": {"r": 0.0},
}


@dataclass(frozen=True)
class AttackConfig:
    """All crafting hyperparameters.

    `rho` and `r` are the maximum model/data neighborhood sizes (l2); with
    `rescale_r` the data radius is scaled by sqrt(D / (3*224*224)) for the
    actual input dimensionality D, keeping per-pixel perturbation density
    comparable across image sizes.
    """

    epsilon: float = 10.0 / 255.0
    epochs: int = 20
    batch_size: int = 125
    k_model: int = 10
    k_data: int = 10
    rho: float = 1.0
    r: float = 32.0
    gamma: float = 0.01
    order: str = "model_first"
    curriculum: bool = True
    clamp_data_box: bool = False
    rescale_r: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "dm-uap"

    def __post_init__(self):
        if self.epsilon < 0 or self.rho < 0 or self.r < 0:
            raise ValueError("epsilon, rho and r must be non-negative")
        if min(self.epochs, self.batch_size, self.k_model, self.k_data) < 1:
            raise ValueError("epochs, batch_size, k_model and k_data must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {self.order!r}")

    def effective_r(self, input_shape):
        if not self.rescale_r:
            return self.r
        dim = int(np.prod(input_shape))
        return self.r * float(np.sqrt(dim / _REFERENCE_DIM))


def apply_variant(config, name):
    """Return the config with one of the named degenerate presets applied."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}, expected one of {sorted(VARIANTS)}")
    return replace(config, variant=name, **VARIANTS[name])


def schedule(config, t):
    """Per-epoch budgets and step sizes (rho_t, r_t, alpha_m, alpha_d).

    With the curriculum on, the neighborhood sizes grow linearly with the
    epoch: rho_t = t * rho / T and r_t = t * r / T; step sizes are always
    alpha_m = rho_t / k_model and alpha_d = 1.25 * r_t / k_data.
    """
    if not 1 <= t <= config.epochs:
        raise ValueError(f"epoch {t} outside 1..{config.epochs}")
    if config.curriculum:
        rho_t = t * config.rho / config.epochs
        r_t = t * config.r / config.epochs
    else:
        rho_t, r_t = config.rho, config.r
    return rho_t, r_t, rho_t / config.k_model, 1.25 * r_t / config.k_data


@dataclass
class UAPState:
    """The perturbation, its Adam moments, and the l-infinity budget."""

    delta: np.ndarray
    adam: AdamState
    epsilon: float
    seed: int = 0


def init_uap(sample_shape, epsilon, seed=0, beta1=0.9, beta2=0.999, adam_eps=1e-8):
    """delta drawn uniformly from (-epsilon, epsilon), fresh Adam moments."""
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-epsilon, epsilon, size=sample_shape)
    return UAPState(
        delta=delta,
        adam=AdamState.zeros(sample_shape, dtype=np.float64, beta1=beta1, beta2=beta2, eps_hat=adam_eps),
        epsilon=float(epsilon),
        seed=seed,
    )


def inner_model_opt(model, X, Y, rho_t, k_steps):
    """Minimize the batch loss over the rho_t-ball of parameters.

    Resets theta-star to the clean parameters, then applies k_steps
    normalized descent steps of length rho_t / k_steps each, so the total
    displacement cannot exceed rho_t. Returns a model carrying theta-star;
    the input model is untouched. rho_t = 0 short-circuits to the input.
    """
    if rho_t < 0:
        raise ValueError("rho_t must be non-negative")
    if rho_t == 0.0:
        return model
    alpha = rho_t / k_steps
    theta = model.flat_params().astype(np.float64)
    current = model.with_params(theta)
    for _ in range(k_steps):
        _, grad = current.loss_grad(X, Y, "parameters")
        theta = normalized_descent_step(theta, grad, alpha)
        current = model.with_params(theta)
    return current


def _row_norms(arr):
    flat = arr.reshape(arr.shape[0], -1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def inner_data_opt(model_star, X, Y, r_t, k_steps, alpha=None, clamp_box=False):
    """Minimize the per-sample loss over an r_t-ball around each sample.

    Vectorized l2 PGD against the already-optimized model: each sample steps
    along its own normalized gradient (step size 1.25 * r_t / k_steps unless
    overridden) and is projected back onto its own ball. Returns float64
    samples; r_t = 0 short-circuits to the input.
    """
    if r_t < 0:
        raise ValueError("r_t must be non-negative")
    if r_t == 0.0:
        return X
    if alpha is None:
        alpha = 1.25 * r_t / k_steps
    x0 = np.asarray(X, dtype=np.float64)
    x = x0
    for _ in range(k_steps):
        x = _data_step(model_star, x, Y, x0, r_t, alpha, clamp_box)
    return x


def _data_step(model_star, x, Y, x0, r_t, alpha, clamp_box):
    """One per-sample normalized descent step plus ball projection."""
    _, grad = model_star.loss_grad(x, Y, "input", reduction="sum")
    grad = grad.astype(np.float64)
    norms = _row_norms(grad)
    moving = norms >= ZERO_GRAD_TOL
    scale = np.where(moving, alpha / np.where(moving, norms, 1.0), 0.0)
    step = grad * scale.reshape(-1, *([1] * (x.ndim - 1)))
    x = x - step
    disp = x - x0
    dnorms = _row_norms(disp)
    outside = dnorms > r_t * (1.0 + 1e-12)
    if np.any(outside):
        shrink = np.where(outside, r_t / np.where(outside, dnorms, 1.0), 1.0)
        x = x0 + disp * shrink.reshape(-1, *([1] * (x.ndim - 1)))
    if clamp_box:
        x = np.clip(x, 0.0, 1.0)
    return x


def uap_update(uap, model_star, X_star, Y, gamma):
    """One Adam ascent step on delta, then clamp to [-epsilon, epsilon].

    The gradient of the mean batch loss at X_star + delta is negated before
    the Adam step (Adam descends; the attack maximizes). Returns the new
    state and the loss the gradient was taken at.
    """
    loss, grad = model_star.loss_grad(X_star, Y, "perturbation", delta=uap.delta)
    update, adam = adam_step(uap.adam, -grad.astype(np.float64), gamma)
    delta = np.clip(uap.delta + update, -uap.epsilon, uap.epsilon)
    return UAPState(delta=delta, adam=adam, epsilon=uap.epsilon, seed=uap.seed), loss


def _alternating_opt(target, X, Y, rho_t, r_t, alpha_m, alpha_d, k_model, k_data, clamp_box):
    """Single model and data steps interleaved until both loops are exhausted.

    Each model step sees the current optimized samples and each data step the
    current theta-star, so the pair evolves jointly; the total step counts
    match the sequential orders (k_model + k_data).
    """
    theta0 = target.flat_params().astype(np.float64)
    theta = theta0
    x0 = np.asarray(X, dtype=np.float64)
    x = x0
    current = target.with_params(theta)
    for k in range(max(k_model, k_data)):
        if k < k_model and rho_t > 0:
            _, grad = current.loss_grad(x, Y, "parameters")
            theta = normalized_descent_step(theta, grad, alpha_m)
            current = target.with_params(theta)
        if k < k_data and r_t > 0:
            x = _data_step(current, x, Y, x0, r_t, alpha_d, clamp_box)
    return current, x


@dataclass
class RunLog:
    """Per-epoch crafting statistics."""

    epochs: list = field(default_factory=list)
    total_seconds: float = 0.0

    def add_epoch(self, **row):
        self.epochs.append(row)

    def summary(self):
        if not self.epochs:
            return {"epochs": 0, "total_seconds": self.total_seconds}
        return {
            "epochs": len(self.epochs),
            "final_mean_loss": self.epochs[-1]["mean_loss"],
            "max_model_disp": max(e["max_model_disp"] for e in self.epochs),
            "max_data_disp": max(e["max_data_disp"] for e in self.epochs),
            "max_delta_inf": max(e["max_delta_inf"] for e in self.epochs),
            "total_seconds": self.total_seconds,
        }

    def write_csv(self, path):
        cols = [
            "epoch", "rho_t", "r_t", "alpha_m", "alpha_d",
            "mean_loss", "max_model_disp", "max_data_disp", "max_delta_inf", "seconds",
        ]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in self.epochs:
                f.write(",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")


def _subseed(seed, tag):
    return fnv1a_64(tag.encode()) ^ seed


def craft(config, model_or_models, dataset):
    """Run the full crafting loop and return (delta, RunLog).

    Per epoch t: compute the schedule; for every seeded mini-batch fetch the
    cached clean-model pseudo-labels, reset theta-star to the clean
    parameters, run the inner minimizations in the configured order, then
    take one Adam ascent step on delta. Ball and clamp invariants are
    asserted after every batch.
    """
    target = as_attack_target(model_or_models)
    if dataset.sample_shape != target.input_shape:
        raise ValueError(
            f"dataset sample shape {dataset.sample_shape} != model input {target.input_shape}"
        )
    resolved = replace(config, r=config.effective_r(target.input_shape), rescale_r=False)
    labels = pseudo_labels(target, dataset)
    theta0 = target.flat_params().astype(np.float64)
    uap = init_uap(
        target.input_shape,
        resolved.epsilon,
        seed=_subseed(resolved.seed, "init-delta"),
        beta1=resolved.adam_beta1,
        beta2=resolved.adam_beta2,
        adam_eps=resolved.adam_eps,
    )
    shuffle_seed = _subseed(resolved.seed, "shuffle")
    log = RunLog()
    start_total = time.perf_counter()
    for t in range(1, resolved.epochs + 1):
        rho_t, r_t, alpha_m, alpha_d = schedule(resolved, t)
        epoch_start = time.perf_counter()
        losses, model_disps, data_disps = [], [0.0], [0.0]
        for batch in minibatches(dataset, resolved.batch_size, epoch_seed=shuffle_seed ^ t):
            Y = labels[batch.indices]
            try:
                if resolved.order == "none":
                    model_star, x_star = target, batch.X
                elif resolved.order == "model_first":
                    model_star = inner_model_opt(target, batch.X, Y, rho_t, resolved.k_model)
                    x_star = inner_data_opt(
                        model_star, batch.X, Y, r_t, resolved.k_data, clamp_box=resolved.clamp_data_box
                    )
                elif resolved.order == "data_first":
                    x_star = inner_data_opt(
                        target, batch.X, Y, r_t, resolved.k_data, clamp_box=resolved.clamp_data_box
                    )
                    model_star = inner_model_opt(target, x_star, Y, rho_t, resolved.k_model)
                else:  # alternating
                    model_star, x_star = _alternating_opt(
                        target, batch.X, Y, rho_t, r_t, alpha_m, alpha_d,
                        resolved.k_model, resolved.k_data, resolved.clamp_data_box,
                    )
                uap, loss = uap_update(uap, model_star, x_star, Y, resolved.gamma)
            except (ValueError, FloatingPointError) as exc:
                raise CraftingFailed(f"epoch {t}, batch indices {batch.indices[:4]}...: {exc}") from exc
            model_disp = (
                0.0 if model_star is target
                else float(np.linalg.norm(model_star.flat_params().astype(np.float64) - theta0))
            )
            data_disp = 0.0 if x_star is batch.X else float(_row_norms(np.asarray(x_star) - batch.X).max())
            delta_inf = float(np.abs(uap.delta).max())
            assert delta_inf <= uap.epsilon, "l-infinity budget violated"
            assert model_disp <= rho_t + 1e-6, "model neighborhood budget violated"
            assert data_disp <= r_t + 1e-6, "data neighborhood budget violated"
            losses.append(loss)
            model_disps.append(model_disp)
            data_disps.append(data_disp)
        log.add_epoch(
            epoch=t,
            rho_t=rho_t,
            r_t=r_t,
            alpha_m=alpha_m,
            alpha_d=alpha_d,
            mean_loss=float(np.mean(losses)),
            max_model_disp=max(model_disps),
            max_data_disp=max(data_disps),
            max_delta_inf=float(np.abs(uap.delta).max()),
            seconds=time.perf_counter() - epoch_start,
        )
    log.total_seconds = time.perf_counter() - start_total
    return uap.delta, log


# -- artifact files -------------------------------------------------------


def file_content_hash(path):
    with open(path, "rb") as f:
        return hashlib.sha1(f.read()).hexdigest()


def save_uap_artifact(path, delta, config, target, dataset, runlog):
    """Write the perturbation container plus JSON metadata and the run CSV."""
    path = str(path)
    save_tensor(path, delta)
    meta = {
        "config": asdict(config),
        "effective_r": config.effective_r(delta.shape),
        "model_fingerprint": target.fingerprint(),
        "dataset_fingerprint": dataset.fingerprint,
        "dataset_name": dataset.name,
        "run_summary": runlog.summary(),
        "content_hash": file_content_hash(path),
    }
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    runlog.write_csv(path + ".log.csv")
    return meta


def load_uap_artifact(path):
    path = str(path)
    delta = load_tensor(path)
    with open(path + ".json") as f:
        meta = json.load(f)
    return delta, meta
