"""Optimization loop: Adam with linear learning-rate decay, global
gradient-norm clipping, location batching, periodic validation, and
deterministic checkpoint resumption.

Reference mode pins the numpy kernels and a stateless per-step RNG so a
resumed run reproduces the uninterrupted loss log bit for bit; fast mode
allows the torch kernels, whose algorithm dispatch may round differently
between runs.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .autodiff import Graph
from .loss import LossWeights, batch_losses
from .metrics import MetricsAccumulator
from .net import forward_views, init_params, load_checkpoint, refine, save_checkpoint


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_start: float = 1e-4
    lr_end: float = 5e-6
    lr_decay_steps: int = 120000
    clip_norm: float = 80.0
    batch_locations: int = 4
    total_steps: int = 20000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "reference"
    val_interval: int = 500

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise TrainError("need lr_start >= lr_end > 0")
        if self.clip_norm <= 0:
            raise TrainError("clip_norm must be positive")
        if self.batch_locations < 1 or self.total_steps < 0 or self.val_interval < 1:
            raise TrainError("batch_locations/val_interval must be >= 1, total_steps >= 0")
        if self.mode not in ("reference", "fast"):
            raise TrainError(f"mode must be 'reference' or 'fast', got {self.mode!r}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["weights"] = [self.weights.lambda_data, self.weights.lambda_grad,
                        self.weights.lambda_gc, self.weights.lambda_reg]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights")
        return cls(weights=LossWeights(*w), **d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear decay lr_start -> lr_end over lr_decay_steps, then constant."""
    if step < 0:
        raise TrainError("step must be non-negative")
    if step >= config.lr_decay_steps:
        return config.lr_end
    frac = step / config.lr_decay_steps
    return config.lr_start + (config.lr_end - config.lr_start) * frac


def gradient_norm(grads: dict) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name].astype(np.float64, copy=False)
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_gradients(grads: dict, max_norm: float = 80.0):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (clipped grads, pre-clip norm).  Non-finite gradients abort
    with the offending parameter names.
    """
    bad = sorted(name for name, g in grads.items() if not np.isfinite(g).all())
    if bad:
        raise TrainError(f"non-finite gradients in {', '.join(bad)}")
    norm = gradient_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    # the shrink margin beats float32's rounding unit, so the re-rounded
    # post-clip norm stays at or below max_norm
    scale = max_norm / norm / (1.0 + 1e-7)  # python float: keeps each gradient's dtype
    return {name: g * scale for name, g in grads.items()}, norm


def init_optimizer(params: dict) -> dict:
    state = {"step": np.zeros((), dtype=np.float32)}
    for name, value in params.items():
        state["m/" + name] = np.zeros_like(value)
        state["v/" + name] = np.zeros_like(value)
    return state


def adam_step(params: dict, grads: dict, state: dict, lr: float, config: TrainConfig):
    """One bias-corrected Adam update; returns (new params, new state)."""
    t = int(np.asarray(state["step"]).flat[0]) + 1
    b1, b2 = config.beta1, config.beta2
    new_params, new_state = {}, {"step": np.asarray(float(t), dtype=np.float32)}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise TrainError(f"gradient shape {g.shape} != parameter shape "
                             f"{theta.shape} for {name}")
        dt = theta.dtype.type
        m = dt(b1) * state["m/" + name] + dt(1 - b1) * g
        v = dt(b2) * state["v/" + name] + dt(1 - b2) * (g * g)
        m_hat = m / dt(1 - b1**t)
        v_hat = v / dt(1 - b2**t)
        new_params[name] = theta - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(config.eps))
        new_state["m/" + name] = m
        new_state["v/" + name] = v
    return new_params, new_state


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stateless per-step generator: resumption needs no RNG serialization."""
    return np.random.default_rng([seed, step])


def _format_log_line(step, components, lr, norm) -> str:
    vals = [float(components[k].data) for k in ("total", "data", "grad", "gc", "reg")]
    cells = " ".join(f"{v:.10g}" for v in vals + [lr, norm])
    return f"{step} {cells}"


def _validation_imae(provider, params, model_config) -> float:
    acc = MetricsAccumulator()
    for bundle, d_hq in provider.val_pairs():
        refined = refine(bundle, params, model_config)
        for t in range(d_hq.shape[0]):
            acc.add(refined[t], d_hq[t])
    return acc.report().imae


def train_loop(provider, model_config, config: TrainConfig, out_dir=None, resume=None):
    """Run the optimization; returns params, state, log lines, best iMAE.

    ``provider`` supplies the data: ``n_train``, ``train_pair(i) ->
    (bundle, d_hq)``, and ``val_pairs() -> iterable`` (empty iterable
    disables validation).  With ``out_dir`` set, checkpoints and an
    append-only ``train_log.txt`` are written there; ``resume`` names a
    checkpoint to continue from.
    """
    prior_backend = _kernels.active_backend()
    _kernels.set_backend("numpy" if config.mode == "reference" else "torch")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        params, state, meta = load_checkpoint(resume)
        start_step = int(meta["step"])
        best_imae = meta.get("best_imae")
    else:
        params = init_params(model_config, seed=config.seed)
        state = init_optimizer(params)
        start_step = 0
        best_imae = None

    def meta_at(step):
        return {
            "step": step,
            "model_config": model_config.to_dict(),
            "train_config": config.to_dict(),
            "best_imae": best_imae,
        }

    log_lines = []
    log_file = open(out_dir / "train_log.txt", "a") if out_dir is not None else None
    if out_dir is not None and resume is None:
        save_checkpoint(out_dir / "checkpoint_latest.ckpt", params, state, meta_at(0))

    def emit(line):
        log_lines.append(line)
        if log_file is not None:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        for step in range(start_step, config.total_steps):
            rng = step_rng(config.seed, step)
            count = min(config.batch_locations, provider.n_train)
            picks = rng.choice(provider.n_train, size=count, replace=False)
            bundles, labels = [], []
            for i in picks:
                bundle, d_hq = provider.train_pair(int(i))
                bundles.append(bundle)
                labels.append(d_hq)

            graph = Graph(np.float32)
            handles = {k: graph.parameter(k, v) for k, v in params.items()}
            outputs = [forward_views(b, handles, model_config) for b in bundles]
            components = batch_losses(outputs, bundles, labels, config.weights, handles)
            loss_value = float(components["total"].data)
            if not np.isfinite(loss_value):
                raise TrainError(f"non-finite loss {loss_value} at step {step}")
            store = graph.backward(components["total"])
            grads = {name: store[name] for name in params}
            try:
                grads, norm = clip_gradients(grads, config.clip_norm)
            except TrainError as e:
                raise TrainError(f"step {step}: {e}") from e
            lr = lr_at(step, config)
            params, state = adam_step(params, grads, state, lr, config)
            emit(_format_log_line(step, components, lr, norm))

            done = step + 1
            if done % config.val_interval == 0 or done == config.total_steps:
                if provider.n_val > 0:
                    imae = _validation_imae(provider, params, model_config)
                    if best_imae is None or imae < best_imae:
                        best_imae = imae
                        if out_dir is not None:
                            save_checkpoint(out_dir / "checkpoint_best.ckpt", params,
                                            state, meta_at(done))
                if out_dir is not None:
                    save_checkpoint(out_dir / "checkpoint_latest.ckpt", params, state,
                                    meta_at(done))
    finally:
        if log_file is not None:
            log_file.close()
        _kernels.set_backend(prior_backend)

    return {
        "params": params,
        "state": state,
        "log_lines": log_lines,
        "best_imae": best_imae,
    }
