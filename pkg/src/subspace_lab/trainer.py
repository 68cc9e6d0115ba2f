"""Pretraining and fine-tuning loops for DSC, BDSC and CLBDSC.

The fine-tuning step for the memory-bank method is, in order: encode the
batch, write it into the bank, self-express the batch against the bank (with
the live rows), decode, weight the three losses, backpropagate, take an Adam
step and re-project diag(C) to zero.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .clustering import ClusterResult, cluster_coefficients, save_predictions
from .config import RunConfig
from .contrastive import clbdsc_forward
from .data import Dataset, gen_union_of_subspaces, load_dataset, load_pgm_dir, resize, save_tensor, load_tensor, split_batches
from .errors import ConfigError, NumericError
from .memory_bank import MemoryBank, consistency_lr, encode_in_batches, init_from_encoder
from .nn import Autoencoder, build_autoencoder
from .optim import AdamState, adam_step
from .selfexpress import (
    SelfExpressiveCoefficients,
    project_zero_diag,
    reconstruct_batch,
    reg_loss,
    ridge_self_expression,
    se_loss,
    total_loss,
)
from .tensor import ParameterSet, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class LossTrace:
    """Per-step loss components plus per-epoch means of the total."""

    steps: list[dict] = field(default_factory=list)

    def record(self, phase: str, epoch: int, step: int, **terms: float) -> None:
        self.steps.append({"phase": phase, "epoch": epoch, "step": step, **terms})

    def totals(self, phase: str | None = None) -> list[float]:
        return [s["total"] for s in self.steps if phase is None or s["phase"] == phase]

    def epoch_means(self, phase: str | None = None) -> list[float]:
        by_epoch: dict[tuple[str, int], list[float]] = {}
        for s in self.steps:
            if phase is None or s["phase"] == phase:
                by_epoch.setdefault((s["phase"], s["epoch"]), []).append(s["total"])
        return [float(np.mean(v)) for v in by_epoch.values()]

    def extend(self, other: LossTrace) -> None:
        self.steps.extend(other.steps)


# construction -----------------------------------------------------------------------


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data_kind == "synthetic":
        ds = gen_union_of_subspaces(cfg.synth_spec())
    elif cfg.data_kind == "tensor":
        ds = load_dataset(cfg.data_path, cfg.labels_path)
    else:
        ds = load_pgm_dir(cfg.data_path, size=tuple(cfg.resize) if cfg.resize else None)
        return ds
    if cfg.resize and ds.X.ndim == 4:
        ds = Dataset(resize(ds.X, *cfg.resize), ds.labels, ds.name)
    return ds


def build_model(cfg: RunConfig, dataset: Dataset) -> Autoencoder:
    shape = dataset.sample_shape
    if cfg.arch == "dense":
        if len(shape) != 1:
            input_dim = int(np.prod(shape))
        else:
            input_dim = shape[0]
        spec = dict(kind="dense", input_dim=input_dim, widths=list(cfg.widths), activation=cfg.activation,
                    batchnorm=cfg.batchnorm, bias=cfg.bias, latent_activation=cfg.latent_activation,
                    init=cfg.init, seed=cfg.seed)
    else:
        if len(shape) != 3:
            raise ConfigError(f"conv autoencoder needs [c, h, w] samples, got {shape}")
        spec = dict(kind="conv", input_shape=list(shape), channels=list(cfg.channels), kernel_size=cfg.kernel_size,
                    stride=cfg.stride, activation=cfg.activation, batchnorm=cfg.batchnorm, seed=cfg.seed)
    return build_autoencoder(spec)


def model_inputs(ae: Autoencoder, dataset: Dataset) -> np.ndarray:
    """Dataset samples in the layout the autoencoder consumes."""
    return dataset.X.reshape(len(dataset), *ae.input_shape)


def build_coefficients(cfg: RunConfig, n_samples: int) -> SelfExpressiveCoefficients:
    return SelfExpressiveCoefficients(n_samples, cfg.effective_c_init(), cfg.c_init_scale, cfg.seed)


def parameter_set(ae: Autoencoder | None, se: SelfExpressiveCoefficients | None = None, encoder_only: bool = False) -> ParameterSet:
    params = ParameterSet()
    if ae is not None:
        for name, p in ae.named_parameters():
            if encoder_only and not name.startswith("encoder."):
                continue
            params.add(name, p)
    if se is not None:
        params.add("C", se.C)
    return params


def finetune_lr(cfg: RunConfig, n_samples: int) -> float:
    k = split_batches(n_samples, cfg.batch_size).k
    if cfg.consistency_reference_k is None:
        return cfg.lr
    return consistency_lr(cfg.lr, k, cfg.consistency_reference_k)


def make_adam(cfg: RunConfig, lr: float) -> AdamState:
    return AdamState(lr=lr, group_lr={"C": cfg.lr_c} if cfg.lr_c is not None else {})


def _check_finite(value: Tensor, phase: str, step: int) -> None:
    if not np.isfinite(value.data).all():
        raise NumericError(f"non-finite loss in {phase} at step {step}")


def _recon_loss(x_hat: Tensor, x: Tensor, mean: bool) -> Tensor:
    loss = ops.frobenius_sq(x_hat, x)
    return ops.mul(loss, 1.0 / x.shape[0]) if mean else loss


# pretraining ---------------------------------------------------------------------------


def pretrain(ae: Autoencoder, dataset: Dataset, cfg: RunConfig, epochs: int | None = None) -> tuple[Autoencoder, LossTrace]:
    """Minimize the reconstruction loss alone, mini-batch by mini-batch."""
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    trace = LossTrace()
    X = model_inputs(ae, dataset)
    params = parameter_set(ae)
    adam = AdamState(lr=cfg.pretrain_lr or cfg.lr)
    ae.train()
    step = 0
    for epoch in range(1, epochs + 1):
        schedule = split_batches(len(X), cfg.batch_size, cfg.shuffle, cfg.seed, epoch)
        for idx in schedule.batches:
            step += 1
            x = Tensor(X[idx])
            loss = _recon_loss(ae(x), x, cfg.mean_recon)
            _check_finite(loss, "pretrain", step)
            backward(loss)
            adam_step(params, adam)
            trace.record("pretrain", epoch, step, recon=loss.item(), total=loss.item())
    return ae, trace


# fine-tuning ----------------------------------------------------------------------------


@dataclass
class TrainState:
    ae: Autoencoder
    se: SelfExpressiveCoefficients
    bank: MemoryBank | None
    adam: AdamState
    epoch: int = 0
    step: int = 0
    phase: str = "finetune"
    trace: LossTrace = field(default_factory=LossTrace)


def _ae_losses(ae, se, x, z, z_hat, cfg):
    x_hat = ae.decode(z_hat)
    recon = _recon_loss(x_hat, x, cfg.mean_recon)
    se_l = se_loss(z, z_hat)
    reg = reg_loss(se)
    return recon, se_l, reg, total_loss(recon, se_l, reg, cfg.alpha, cfg.beta)


def bdsc_step(state: TrainState, X: np.ndarray, idx: np.ndarray, cfg: RunConfig, params: ParameterSet) -> dict:
    ae, se, bank = state.ae, state.se, state.bank
    x = Tensor(X[idx])
    z = ae.encode(x)
    bank.write_batch(idx, z, state.epoch, state.step)
    z_hat = reconstruct_batch(se, bank, idx, z)
    recon, se_l, reg, total = _ae_losses(ae, se, x, z, z_hat, cfg)
    _check_finite(total, "finetune", state.step)
    backward(total)
    adam_step(params, state.adam)
    project_zero_diag(se)
    return {"recon": recon.item(), "se": se_l.item(), "reg": reg.item(), "total": total.item()}


def dsc_step(state: TrainState, X: np.ndarray, cfg: RunConfig, params: ParameterSet) -> dict:
    """Full-batch step: the whole dataset is encoded and self-expressed at once."""
    ae, se = state.ae, state.se
    x = Tensor(X)
    z = ae.encode(x)
    z_hat = ops.matmul(se.C, z)
    recon, se_l, reg, total = _ae_losses(ae, se, x, z, z_hat, cfg)
    _check_finite(total, "finetune", state.step)
    backward(total)
    adam_step(params, state.adam)
    project_zero_diag(se)
    return {"recon": recon.item(), "se": se_l.item(), "reg": reg.item(), "total": total.item()}


def _run_epochs(state: TrainState, dataset: Dataset, cfg: RunConfig, epochs: int, step_fn, checkpoint_dir=None) -> TrainState:
    X = model_inputs(state.ae, dataset)
    target = state.epoch + epochs
    while state.epoch < target:
        state.epoch += 1
        schedule = split_batches(len(X), cfg.batch_size, cfg.shuffle, cfg.seed, state.epoch)
        for idx in schedule.batches:
            state.step += 1
            terms = step_fn(state, X, idx)
            state.trace.record(state.phase, state.epoch, state.step, **terms)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, state, cfg)
    return state


def start_finetune(ae: Autoencoder, dataset: Dataset, cfg: RunConfig, se: SelfExpressiveCoefficients | None = None) -> TrainState:
    """Initialize C and (for mini-batch methods) the memory bank from the current encoder."""
    se = se or build_coefficients(cfg, len(dataset))
    bank = None
    if cfg.method != "dsc":
        bank = init_from_encoder(ae, Dataset(model_inputs(ae, dataset), dataset.labels), cfg.batch_size, n_samples=se.N)
    lr = finetune_lr(cfg, len(dataset))
    phase = "se_pretrain" if cfg.method == "clbdsc" and cfg.se_pretrain_epochs > 0 else "finetune"
    return TrainState(ae, se, bank, make_adam(cfg, lr), phase=phase)


def finetune_bdsc(state: TrainState, dataset: Dataset, cfg: RunConfig, epochs: int | None = None, checkpoint_dir=None) -> TrainState:
    if state.bank is None or state.bank.N != len(dataset):
        raise ConfigError("memory bank missing or sized differently from the dataset")
    params = parameter_set(state.ae, state.se)
    state.ae.train()
    step_fn = lambda st, X, idx: bdsc_step(st, X, idx, cfg, params)  # noqa: E731
    return _run_epochs(state, dataset, cfg, _remaining(state, cfg, epochs), step_fn, checkpoint_dir)


def _remaining(state: TrainState, cfg: RunConfig, epochs: int | None) -> int:
    # explicit epochs means "this many more"; otherwise finish the configured budget (resume-safe)
    return max(cfg.finetune_epochs - state.epoch, 0) if epochs is None else epochs


def finetune_dsc(state: TrainState, dataset: Dataset, cfg: RunConfig, epochs: int | None = None, checkpoint_dir=None) -> TrainState:
    params = parameter_set(state.ae, state.se)
    state.ae.train()
    full = cfg.replace(batch_size=len(dataset), shuffle=False)
    step_fn = lambda st, X, idx: dsc_step(st, X, cfg, params)  # noqa: E731
    return _run_epochs(state, dataset, full, _remaining(state, cfg, epochs), step_fn, checkpoint_dir)


def _clbdsc_step(state: TrainState, X, idx, cfg: RunConfig, params: ParameterSet, frozen: bool) -> dict:
    rng = np.random.default_rng([cfg.seed, state.epoch, state.step])
    encoder = state.ae.encode
    if frozen:
        def encoder(x):
            with no_grad():
                return state.ae.encode(x)
    total, diag = clbdsc_forward(
        encoder, state.se, state.bank, X[idx], idx, cfg.augmentation(), cfg.alpha, cfg.beta, cfg.tau, rng,
        state.epoch, state.step, cfg.include_positive_in_denominator,
    )
    backward(total)
    adam_step(params, state.adam)
    project_zero_diag(state.se)
    return diag


def finetune_clbdsc(state: TrainState, dataset: Dataset, cfg: RunConfig, checkpoint_dir=None) -> TrainState:
    """Phase 1 optimizes C with the encoder frozen; phase 2 trains encoder and C jointly."""
    if state.bank is None:
        raise ConfigError("CLBDSC needs an initialized memory bank")
    if state.phase == "se_pretrain":
        done = sum(1 for _ in {s["epoch"] for s in state.trace.steps if s["phase"] == "se_pretrain"})
        remaining = cfg.se_pretrain_epochs - done
        if remaining > 0:
            state.ae.eval()
            params = ParameterSet({"C": state.se.C})
            step_fn = lambda st, X, idx: _clbdsc_step(st, X, idx, cfg, params, frozen=True)  # noqa: E731
            _run_epochs(state, dataset, cfg, remaining, step_fn, checkpoint_dir)
        state.phase = "finetune"
        state.adam = make_adam(cfg, finetune_lr(cfg, len(dataset)))
    done = len({s["epoch"] for s in state.trace.steps if s["phase"] == "finetune"})
    remaining = cfg.finetune_epochs - done
    if remaining > 0:
        state.ae.train()
        params = parameter_set(state.ae, state.se, encoder_only=True)
        step_fn = lambda st, X, idx: _clbdsc_step(st, X, idx, cfg, params, frozen=False)  # noqa: E731
        _run_epochs(state, dataset, cfg, remaining, step_fn, checkpoint_dir)
    return state


def finetune(state: TrainState, dataset: Dataset, cfg: RunConfig, checkpoint_dir=None) -> TrainState:
    if cfg.method == "dsc":
        return finetune_dsc(state, dataset, cfg, checkpoint_dir=checkpoint_dir)
    if cfg.method == "bdsc":
        return finetune_bdsc(state, dataset, cfg, checkpoint_dir=checkpoint_dir)
    return finetune_clbdsc(state, dataset, cfg, checkpoint_dir=checkpoint_dir)


# checkpoints -------------------------------------------------------------------------------


def _safe(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(directory, state: TrainState, cfg: RunConfig) -> Path:
    """Tensor files for parameters, buffers, C, bank and Adam moments, plus ``state.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in state.ae.state_dict().items():
        save_tensor(d / f"model__{_safe(name)}.sctd", arr.reshape(arr.shape or (1,)))
    save_tensor(d / "C.sctd", state.se.C.data)
    if state.bank is not None:
        for name, arr in state.bank.state_dict().items():
            save_tensor(d / f"bank__{name}.sctd", arr)
    for name in state.adam.m:
        save_tensor(d / f"adam_m__{_safe(name)}.sctd", state.adam.m[name])
        save_tensor(d / f"adam_v__{_safe(name)}.sctd", state.adam.v[name])
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "phase": state.phase,
        "adam": {"lr": state.adam.lr, "step": state.adam.step, "group_lr": state.adam.group_lr, "params": sorted(state.adam.m)},
        "config": cfg.to_dict(),
        "trace": state.trace.steps,
    }
    (d / "state.json").write_text(json.dumps(meta))
    return d


def load_checkpoint(directory, dataset: Dataset | None = None) -> tuple[TrainState, RunConfig]:
    d = Path(directory)
    meta = json.loads((d / "state.json").read_text())
    cfg = RunConfig.from_dict(meta["config"])
    dataset = dataset if dataset is not None else load_data(cfg)
    ae = build_model(cfg, dataset)
    shapes = ae.state_dict()
    ae.load_state_dict({k: load_tensor(d / f"model__{_safe(k)}.sctd").reshape(v.shape) for k, v in shapes.items()})
    se = SelfExpressiveCoefficients.from_array(load_tensor(d / "C.sctd"))
    bank = None
    if (d / "bank__Z.sctd").exists():
        bank = MemoryBank(*load_tensor(d / "bank__Z.sctd").shape)
        bank.load_state_dict({k: load_tensor(d / f"bank__{k}.sctd") for k in ("Z", "epoch", "step")})
    a = meta["adam"]
    adam = AdamState(lr=a["lr"], step=a["step"], group_lr=a["group_lr"])
    for name in a["params"]:
        adam.m[name] = load_tensor(d / f"adam_m__{_safe(name)}.sctd")
        adam.v[name] = load_tensor(d / f"adam_v__{_safe(name)}.sctd")
    state = TrainState(ae, se, bank, adam, meta["epoch"], meta["step"], meta["phase"], LossTrace(meta["trace"]))
    return state, cfg


# end-to-end --------------------------------------------------------------------------------


@dataclass
class PipelineResult:
    result: ClusterResult
    manifest: dict
    state: TrainState


def _n_clusters(cfg: RunConfig, dataset: Dataset) -> int:
    if cfg.n_clusters:
        return cfg.n_clusters
    if dataset.labels is None:
        raise ConfigError("n_clusters must be set when the dataset has no labels")
    return dataset.n_classes


def full_pipeline(cfg: RunConfig, out_dir=None, dataset: Dataset | None = None, extra: dict | None = None) -> PipelineResult:
    """Pretrain, initialize the bank, fine-tune, cluster C and score it.

    ``extra`` is merged into the manifest (the CLI records its overrides there).
    """
    cfg.validate()
    t0 = time.time()
    dataset = dataset if dataset is not None else load_data(cfg)
    ae = build_model(cfg, dataset)
    pre_trace = LossTrace()
    if not cfg.pretrained and cfg.pretrain_epochs > 0:
        ae, pre_trace = pretrain(ae, dataset, cfg)
    state = start_finetune(ae, dataset, cfg)
    checkpoint_dir = Path(out_dir) / "checkpoint" if out_dir else None
    state = finetune(state, dataset, cfg)
    k = _n_clusters(cfg, dataset)
    result = cluster_coefficients(state.se, k, dataset.labels, cfg.affinity, cfg.affinity_q, cfg.cluster_seed)
    manifest = {
        "config": cfg.to_dict(),
        "seeds": {"model": cfg.seed, "data": cfg.synth_seed, "cluster": cfg.cluster_seed},
        "n_samples": len(dataset),
        "n_clusters": k,
        "losses": {
            "pretrain": pre_trace.epoch_means(),
            "se_pretrain": state.trace.epoch_means("se_pretrain"),
            "finetune": state.trace.epoch_means("finetune"),
        },
        "metrics": {"acc": result.acc, "nmi": result.nmi},
        "wall_time_s": time.time() - t0,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {},
        **(extra or {}),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_dir, state, cfg)
        save_tensor(out / "C.sctd", state.se.C.data)
        save_tensor(out / "affinity.sctd", result.affinity)
        save_predictions(out / "labels.csv", result.labels, dataset.labels)
        manifest["artifacts"] = {
            "checkpoint": str(checkpoint_dir),
            "C": str(out / "C.sctd"),
            "affinity": str(out / "affinity.sctd"),
            "labels": str(out / "labels.csv"),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return PipelineResult(result, manifest, state)


def replay_manifest(manifest: dict, out_dir=None) -> PipelineResult:
    return full_pipeline(RunConfig.from_dict(manifest["config"]), out_dir)


def two_step_baseline(cfg: RunConfig, dataset: Dataset | None = None) -> ClusterResult:
    """Pretrained-autoencoder features + closed-form ridge self-expression + spectral clustering."""
    cfg.validate()
    dataset = dataset if dataset is not None else load_data(cfg)
    ae = build_model(cfg, dataset)
    if not cfg.pretrained and cfg.pretrain_epochs > 0:
        ae, _ = pretrain(ae, dataset, cfg)
    ae.eval()
    Z = encode_in_batches(ae.encode, model_inputs(ae, dataset), cfg.batch_size)
    C = ridge_self_expression(Z, cfg.ridge_lambda)
    return cluster_coefficients(C, _n_clusters(cfg, dataset), dataset.labels, cfg.affinity, cfg.affinity_q, cfg.cluster_seed)


def equivalence_check(cfg: RunConfig, steps: int = 10, batch_size: int | None = None, dataset: Dataset | None = None) -> dict:
    """Run the full-batch and memory-bank code paths side by side from identical initial states.

    With ``batch_size`` equal to N (the default) both paths compute the same
    function, so parameter and loss deviations should be at rounding level.
    """
    cfg = cfg.replace(shuffle=False).validate()
    dataset = dataset if dataset is not None else load_data(cfg)
    n = len(dataset)
    batch_size = n if batch_size is None else batch_size
    results = {}
    for method in ("dsc", "bdsc"):
        run_cfg = cfg.replace(method=method, batch_size=batch_size if method == "bdsc" else n)
        ae = build_model(run_cfg, dataset)
        state = start_finetune(ae, dataset, run_cfg)
        X = model_inputs(ae, dataset)
        params = parameter_set(state.ae, state.se)
        state.ae.train()
        losses = []
        schedule = split_batches(n, run_cfg.batch_size)
        batches = schedule.batches
        for s in range(steps):
            state.step += 1
            state.epoch = s // len(batches) + 1
            if method == "dsc":
                terms = dsc_step(state, X, run_cfg, params)
            else:
                terms = bdsc_step(state, X, batches[s % len(batches)], run_cfg, params)
            losses.append(terms["total"])
        results[method] = (params.state(), np.array(losses))
    p_dsc, l_dsc = results["dsc"]
    p_bdsc, l_bdsc = results["bdsc"]
    param_dev = max((float(np.max(np.abs(p_dsc[k] - p_bdsc[k]))) for k in p_dsc), default=0.0)
    loss_dev = float(np.max(np.abs(l_dsc - l_bdsc))) if steps else 0.0
    return {"steps": steps, "batch_size": batch_size, "max_param_dev": param_dev, "max_loss_dev": loss_dev}


def ablation_sweep(cfg: RunConfig, grid: list[dict], dataset: Dataset | None = None) -> list[dict]:
    """One full pipeline per grid cell; failures are recorded and the sweep continues."""
    if not grid:
        raise ConfigError("sweep grid is empty")
    rows = []
    for cell in grid:
        row = dict(cell)
        try:
            res = full_pipeline(cfg.replace(**cell), dataset=dataset)
            row.update(acc=res.result.acc, nmi=res.result.nmi, error="")
        except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the sweep
            log.warning("sweep cell %s failed: %s", cell, exc)
            row.update(acc=float("nan"), nmi=float("nan"), error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows
