"""Physics-informed autoencoder calibration.

The encoder maps (measurements, mask, boundary features) to parameters
in the unit cube; the decoder maps (unit parameters, boundary features)
back to measurements.  Training minimizes, per period,

    ||M_hat - M_tilde||^2 + gamma * ||M - M_hat||^2

on normalized features, where ``M_hat`` is the decoder output and
``M_tilde`` the relaxed CTM run with the encoded parameters.  In the
``detached`` gradient mode ``M_tilde`` is a constant within each step; in
``full`` mode its finite-difference Jacobian carries the physics term's
gradient back into the encoder (every ``jacobian_every`` steps).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .batch import BoundaryBatch, observe_batch
from .domain import (BoundaryConditions, FreewayGeometry, MeasurementSeries, ObservationMask, ParamBounds,
                     PeriodDataset, TrafficParams, param_dim, param_names, unit_to_vector, unit_vjp)
from .nn import (NetworkSpec, NetworkWeights, OptimizerState, adam_step, backward, forward, init_weights,
                 load_container, save_container)
from .smooth import SmoothingConfig, jacobian_batch

log = logging.getLogger(__name__)

GRADIENT_MODES = ("detached", "full")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, epoch, step, last_model=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.last_model = last_model


# -- features ----------------------------------------------------------------------

def boundary_features(b: BoundaryConditions, g: FreewayGeometry) -> np.ndarray:
    """Boundary inputs at detector resolution, flattened.

    Layout: window-mean demands (K x T/m), window-mean ratios (K x T/m),
    window-mean downstream speed (T/m), initial densities (K).  Window
    ``j`` covers steps ``j*m + 1 .. (j+1)*m``, matching the detectors.
    """
    m, n = g.obs_multiple, g.n_obs

    def win(a):
        return a[..., 1:].reshape(*a.shape[:-1], n, m).mean(axis=-1)

    return np.concatenate([win(b.demands).ravel(), win(b.mainline_ratios).ravel(), win(b.downstream_speed),
                           b.initial_densities])


@dataclass
class FeatureScaler:
    """Per-feature affine scaling fitted on training periods only."""

    meas_mean: np.ndarray
    meas_std: np.ndarray
    bnd_mean: np.ndarray
    bnd_std: np.ndarray

    @classmethod
    def fit(cls, payloads: np.ndarray, masks: np.ndarray, bfeats: np.ndarray) -> "FeatureScaler":
        """``payloads``/``masks``: (P, 3K, n); ``bfeats``: (P, nb).

        Measurements are centered per entry and scaled by one standard
        deviation per channel (ramp flow, mainline flow, speed), so errors
        stay in physical proportion within a channel and the channels
        weigh comparably against each other.  The scale never drops below
        a tenth of the channel's RMS magnitude, which keeps tiny or
        single-period training sets well conditioned.
        """
        P, R, n = payloads.shape
        K = R // 3
        w = masks.astype(float)
        cnt = np.maximum(w.sum(axis=0), 1.0)
        mean = (payloads * w).sum(axis=0) / cnt
        std = np.empty_like(mean)
        for ch in range(3):
            sl = slice(ch * K, (ch + 1) * K)
            sel = masks[:, sl]
            d = (payloads[:, sl] - mean[sl])[sel]
            mag = float(np.sqrt(np.mean(payloads[:, sl][sel] ** 2))) if d.size else 1.0
            dev = float(np.sqrt(np.mean(d ** 2))) if d.size else 1.0
            std[sl] = max(dev, 0.1 * mag, 1e-6)
        bmean = bfeats.mean(axis=0)
        bstd = bfeats.std(axis=0)
        bstd = np.where(bstd > 1e-9, bstd, 1.0)
        return cls(mean.ravel(), std.ravel(), bmean, bstd)

    def norm_meas(self, x):
        return (np.reshape(x, (*np.shape(x)[:-2], -1)) - self.meas_mean) / self.meas_std

    def denorm_meas(self, z, shape):
        return (z * self.meas_std + self.meas_mean).reshape(*np.shape(z)[:-1], *shape)

    def norm_bnd(self, b):
        return (b - self.bnd_mean) / self.bnd_std

    def arrays(self, prefix="scaler_"):
        return {prefix + k: v for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays, prefix="scaler_"):
        return cls(*(arrays[prefix + k] for k in ("meas_mean", "meas_std", "bnd_mean", "bnd_std")))


# -- model -------------------------------------------------------------------------

@dataclass
class AutoencoderModel:
    geometry: FreewayGeometry
    bounds: ParamBounds
    encoder_spec: NetworkSpec
    encoder: NetworkWeights
    decoder_spec: NetworkSpec
    decoder: NetworkWeights
    scaler: FeatureScaler
    smoothing: SmoothingConfig = SmoothingConfig()
    mode: str = "consistent"

    @property
    def meas_shape(self):
        return (3 * self.geometry.cell_count, self.geometry.n_obs)

    @property
    def n_params(self):
        return param_dim(self.geometry.cell_count)

    def copy(self) -> "AutoencoderModel":
        return replace(self, encoder=self.encoder.copy(), decoder=self.decoder.copy())

    def encoder_inputs(self, payloads: np.ndarray, masks: np.ndarray, zb: np.ndarray) -> np.ndarray:
        """Zero-filled normalized measurements, mask bits, normalized boundary features."""
        z = self.scaler.norm_meas(payloads)
        mflat = masks.reshape(masks.shape[0], -1).astype(float)
        return np.concatenate([z * mflat, mflat, zb], axis=1)

    def save(self, path, extra_meta: dict | None = None, extra_arrays: dict | None = None) -> None:
        meta = {
            "geometry": self.geometry.to_dict(),
            "geometry_fingerprint": self.geometry.fingerprint(),
            "bounds": self.bounds.to_dict(),
            "encoder_spec": self.encoder_spec.to_dict(),
            "decoder_spec": self.decoder_spec.to_dict(),
            "smoothing": asdict(self.smoothing),
            "mode": self.mode,
        }
        meta.update(extra_meta or {})
        arrays = {f"enc_{i}": a for i, a in enumerate(self.encoder.arrays())}
        arrays.update({f"dec_{i}": a for i, a in enumerate(self.decoder.arrays())})
        arrays.update(self.scaler.arrays())
        arrays.update(extra_arrays or {})
        save_container(path, meta, arrays)

    @classmethod
    def load(cls, path, geometry: FreewayGeometry | None = None) -> "AutoencoderModel":
        model, _, _ = load_checkpoint(path, geometry)
        return model


def load_checkpoint(path, geometry: FreewayGeometry | None = None):
    """Returns ``(model, meta, arrays)``; verifies the geometry fingerprint when ``geometry`` is given."""
    meta, arrays = load_container(path)
    g = FreewayGeometry.from_dict(meta["geometry"])
    if g.fingerprint() != meta["geometry_fingerprint"]:
        raise ValueError(f"{path}: corrupted geometry record")
    if geometry is not None and geometry.fingerprint() != meta["geometry_fingerprint"]:
        raise ValueError(f"{path}: checkpoint geometry does not match the data geometry")
    es, ds = NetworkSpec.from_dict(meta["encoder_spec"]), NetworkSpec.from_dict(meta["decoder_spec"])
    n_e, n_d = 2 * (len(es.widths) - 1), 2 * (len(ds.widths) - 1)
    enc = NetworkWeights.from_arrays(arrays[f"enc_{i}"] for i in range(n_e))
    dec = NetworkWeights.from_arrays(arrays[f"dec_{i}"] for i in range(n_d))
    enc.check(es)
    dec.check(ds)
    model = AutoencoderModel(g, ParamBounds.from_dict(meta["bounds"]), es, enc, ds, dec,
                             FeatureScaler.from_arrays(arrays), SmoothingConfig(**meta["smoothing"]), meta["mode"])
    return model, meta, arrays


def build_model(geometry: FreewayGeometry, bounds: ParamBounds, periods: Sequence[PeriodDataset],
                encoder_hidden=(256, 128), decoder_hidden=(256, 256), activation="tanh", seed=0,
                smoothing: SmoothingConfig = SmoothingConfig(), mode="consistent", zero_encoder=False
                ) -> AutoencoderModel:
    payloads = np.stack([p.measurements.stacked() for p in periods])
    masks = np.stack([p.measurements.mask.bits for p in periods])
    bfeats = np.stack([boundary_features(p.boundary, geometry) for p in periods])
    scaler = FeatureScaler.fit(payloads, masks, bfeats)
    nm, nb, P = payloads[0].size, bfeats.shape[1], param_dim(geometry.cell_count)
    es = NetworkSpec((2 * nm + nb, *encoder_hidden, P), activation, "bounded", seed)
    ds = NetworkSpec((P + nb, *decoder_hidden, nm), activation, "linear", seed + 1)
    enc = init_weights(es)
    if zero_encoder:
        enc = NetworkWeights([np.zeros_like(w) for w in enc.weights], [np.zeros_like(b) for b in enc.biases])
    return AutoencoderModel(geometry, bounds, es, enc, ds, init_weights(ds), scaler, smoothing, mode)


# -- operations --------------------------------------------------------------------

def _stack(periods: Sequence[PeriodDataset], g: FreewayGeometry):
    payloads = np.stack([p.measurements.stacked() for p in periods])
    masks = np.stack([p.measurements.mask.bits for p in periods])
    bfeats = np.stack([boundary_features(p.boundary, g) for p in periods])
    return payloads, masks, bfeats


def encode_batch(model: AutoencoderModel, payloads, masks, bfeats):
    """Unit-cube parameters ``(B, P)`` for a batch."""
    x = model.encoder_inputs(payloads, masks, model.scaler.norm_bnd(bfeats))
    u, _ = forward(model.encoder_spec, model.encoder, x)
    return u


def encode(model: AutoencoderModel, measurements: MeasurementSeries, boundary: BoundaryConditions
           ) -> TrafficParams:
    """Calibrated parameters for one period (masked entries are zero-filled on input)."""
    payload = measurements.stacked()
    if payload.shape != model.meas_shape:
        raise ValueError(f"measurements have shape {payload.shape}, model expects {model.meas_shape}")
    if boundary.horizon != model.geometry.horizon or boundary.cell_count != model.geometry.cell_count:
        raise ValueError("boundary does not match the model geometry")
    if not np.all(np.isfinite(payload)):
        raise ValueError("non-finite measurements")
    u = encode_batch(model, payload[None], measurements.mask.bits[None],
                     boundary_features(boundary, model.geometry)[None])[0]
    return TrafficParams.from_vector(unit_to_vector(u, model.bounds), model.geometry.cell_count)


def decode_batch(model: AutoencoderModel, u, bfeats):
    x = np.concatenate([u, model.scaler.norm_bnd(bfeats)], axis=1)
    z, _ = forward(model.decoder_spec, model.decoder, x)
    return z


def decode(model: AutoencoderModel, theta: TrafficParams, boundary: BoundaryConditions) -> np.ndarray:
    """Reconstructed measurement payload ``(3K, T/m)`` in physical units."""
    from .domain import to_unit
    u = to_unit(theta, model.bounds)
    z = decode_batch(model, u[None], boundary_features(boundary, model.geometry)[None])
    return model.scaler.denorm_meas(z, model.meas_shape)[0]


def physics_target(theta: TrafficParams, boundary: BoundaryConditions, g: FreewayGeometry,
                   cfg: SmoothingConfig = SmoothingConfig(), mode: str = "consistent") -> np.ndarray:
    """Relaxed CTM run, observed: ``(3K, T/m)``."""
    return observe_batch([boundary], theta.to_vector()[None], g, tau=cfg.tau, beta=cfg.beta, mode=mode,
                         check=False)[0]


@dataclass(frozen=True)
class LossParts:
    total: float
    physics: float
    reconstruction: float


def loss(M, mask, M_hat, M_tilde, gamma: float, scaler: FeatureScaler | None = None) -> LossParts:
    """Physics term plus ``gamma`` times the reconstruction term over observed entries.

    Inputs are physical arrays scaled with ``scaler``, or already
    normalized when ``scaler`` is None.
    """
    M, M_hat, M_tilde = (np.asarray(a, dtype=float) for a in (M, M_hat, M_tilde))
    if not (M.shape == M_hat.shape == M_tilde.shape):
        raise ValueError("loss inputs must share one shape")
    bits = mask.bits if isinstance(mask, ObservationMask) else np.asarray(mask, dtype=bool)
    if bits.shape != M.shape:
        raise ValueError("mask shape does not match")
    if scaler is not None:
        shape = M.shape
        M, M_hat, M_tilde = (scaler.norm_meas(a).reshape(shape) for a in (M, M_hat, M_tilde))
    phys = float(np.sum((M_hat - M_tilde) ** 2))
    rec = float(np.sum(np.where(bits, M - M_hat, 0.0) ** 2))
    return LossParts(phys + gamma * rec, phys, rec)


@dataclass(frozen=True)
class DenoisingSample:
    corrupted: MeasurementSeries  # M*_p: ground truth with a sampled mask applied
    truth: MeasurementSeries  # complete M_p
    boundary: BoundaryConditions
    period_id: str

    @property
    def mask(self) -> ObservationMask:
        return self.corrupted.mask


def synthesize_denoising_batch(periods: Sequence[PeriodDataset], pool: Sequence[ObservationMask], seed,
                               size: int | None = None) -> list[DenoisingSample]:
    """Pair complete periods with masks, both drawn uniformly with replacement."""
    if not periods:
        raise ValueError("no complete periods to sample from")
    if not pool:
        raise ValueError("empty mask pool")
    for p in periods:
        if not p.measurements.mask.is_full:
            raise ValueError(f"period {p.period_id} is incomplete; denoising needs complete ground truth")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(periods) if size is None else int(size)
    pi = rng.integers(len(periods), size=n)
    mi = rng.integers(len(pool), size=n)
    out = []
    for a, b in zip(pi, mi):
        p = periods[int(a)]
        out.append(DenoisingSample(p.measurements.with_mask(pool[int(b)]), p.measurements, p.boundary, p.period_id))
    return out


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 0.8
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_decay: float = 1.0  # multiplicative per epoch
    min_learning_rate: float = 1e-5
    denoising: bool = False
    mask_rates: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    mask_pool_size: int = 256
    gradient_mode: str = "detached"
    jacobian_every: int = 1
    validation_fraction: float = 0.1
    patience: int = 20
    seed: int = 0
    encoder_hidden: tuple = (256, 128)
    decoder_hidden: tuple = (256, 256)
    activation: str = "tanh"
    smoothing: SmoothingConfig = SmoothingConfig()
    mode: str = "consistent"
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.jacobian_every < 1:
            raise ValueError("jacobian_every must be positive")

    def to_dict(self):
        d = asdict(self)
        d["mask_rates"] = list(self.mask_rates)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "smoothing" in d and isinstance(d["smoothing"], dict):
            d["smoothing"] = SmoothingConfig(**d["smoothing"])
        for k in ("mask_rates", "encoder_hidden", "decoder_hidden"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class CalibrationResult:
    params: dict[str, TrafficParams]
    losses: dict[str, LossParts] = field(default_factory=dict)
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    method: str = "autoencoder"


@dataclass
class _Batch:
    """Arrays for one training/evaluation batch."""

    enc_payload: np.ndarray
    enc_mask: np.ndarray
    target: np.ndarray  # normalized, flattened
    target_mask: np.ndarray  # flattened bool
    bfeats: np.ndarray
    boundaries: BoundaryBatch


def step_loss_and_grads(model: AutoencoderModel, batch: _Batch, gamma: float, full: bool,
                        freeze_encoder: bool = False, physics_override: np.ndarray | None = None):
    """Mean per-period loss over the batch with gradients for both networks.

    ``physics_override`` replaces the relaxed CTM output (normalized), for
    gradient checks with a frozen physics target.
    """
    g = model.geometry
    B = batch.enc_payload.shape[0]
    zb = model.scaler.norm_bnd(batch.bfeats)
    xe = model.encoder_inputs(batch.enc_payload, batch.enc_mask, zb)
    u, cache_e = forward(model.encoder_spec, model.encoder, xe)
    xd = np.concatenate([u, zb], axis=1)
    z_hat, cache_d = forward(model.decoder_spec, model.decoder, xd)
    theta = unit_to_vector(u, model.bounds)
    jac = None
    if physics_override is not None:
        z_tilde = physics_override
    else:
        if full:
            obs, jac = jacobian_batch(batch.boundaries, theta, g, model.smoothing, model.mode)
        else:
            obs = observe_batch(batch.boundaries, theta, g, tau=model.smoothing.tau, beta=model.smoothing.beta,
                                mode=model.mode, check=False).reshape(B, -1)
        z_tilde = model.scaler.norm_meas(obs.reshape(B, *model.meas_shape))
    res_p = z_hat - z_tilde
    res_r = np.where(batch.target_mask, batch.target - z_hat, 0.0)
    phys = np.sum(res_p ** 2, axis=1)
    rec = np.sum(res_r ** 2, axis=1)
    d_zhat = (2.0 / B) * (res_p - gamma * res_r)
    grads_d, d_xd = backward(model.decoder_spec, model.decoder, cache_d, d_zhat)
    d_u = d_xd[:, :u.shape[1]]
    if jac is not None:
        d_obs = -(2.0 / B) * res_p / model.scaler.meas_std
        d_theta = np.einsum("bd,bdp->bp", d_obs, jac)
        d_u = d_u + unit_vjp(u, d_theta, model.bounds)
    if freeze_encoder:
        grads_e = NetworkWeights([np.zeros_like(w) for w in model.encoder.weights],
                                 [np.zeros_like(b) for b in model.encoder.biases])
    else:
        grads_e, _ = backward(model.encoder_spec, model.encoder, cache_e, d_u)
    return (float(np.mean(phys + gamma * rec)), float(np.mean(phys)), float(np.mean(rec)),
            grads_e, grads_d, u)


def _make_batch(model: AutoencoderModel, periods: Sequence[PeriodDataset], corrupted=None) -> _Batch:
    """``corrupted`` optionally supplies (payloads, masks) for the encoder input."""
    payloads, masks, bfeats = _stack(periods, model.geometry)
    B = len(periods)
    if corrupted is None:
        enc_p, enc_m = payloads, masks
    else:
        enc_p, enc_m = corrupted
    return _Batch(enc_p, enc_m, model.scaler.norm_meas(payloads), masks.reshape(B, -1), bfeats,
                  BoundaryBatch.from_list([p.boundary for p in periods]))


def evaluate_loss(model: AutoencoderModel, periods: Sequence[PeriodDataset], gamma: float
                  ) -> dict[str, LossParts]:
    """Per-period loss decomposition under the current weights."""
    if not periods:
        return {}
    batch = _make_batch(model, periods)
    B = len(periods)
    zb = model.scaler.norm_bnd(batch.bfeats)
    u, _ = forward(model.encoder_spec, model.encoder, model.encoder_inputs(batch.enc_payload, batch.enc_mask, zb))
    z_hat, _ = forward(model.decoder_spec, model.decoder, np.concatenate([u, zb], axis=1))
    obs = observe_batch(batch.boundaries, unit_to_vector(u, model.bounds), model.geometry,
                        tau=model.smoothing.tau, beta=model.smoothing.beta, mode=model.mode, check=False)
    z_tilde = model.scaler.norm_meas(obs)
    phys = np.sum((z_hat - z_tilde) ** 2, axis=1)
    rec = np.sum(np.where(batch.target_mask, batch.target - z_hat, 0.0) ** 2, axis=1)
    return {p.period_id: LossParts(float(a + gamma * b), float(a), float(b)) for p, a, b in zip(periods, phys, rec)}


def _mean_parts(parts: dict[str, LossParts]) -> tuple[float, float, float]:
    vals = np.array([[p.total, p.physics, p.reconstruction] for p in parts.values()])
    return tuple(float(x) for x in vals.mean(axis=0))


@dataclass
class TrainingState:
    """Everything needed to resume training bit-identically."""

    model: AutoencoderModel
    opt_e: OptimizerState
    opt_d: OptimizerState
    epoch: int = 0
    best_val: float = np.inf
    best_epoch: int = -1
    best_model: AutoencoderModel | None = None
    curve: list = field(default_factory=list)


def _opt_arrays(prefix, st: OptimizerState):
    out = {}
    for i, a in enumerate(st.m or []):
        out[f"{prefix}m_{i}"] = a
    for i, a in enumerate(st.v or []):
        out[f"{prefix}v_{i}"] = a
    return out


def save_training_state(state: TrainingState, config: TrainingConfig, split: dict, path) -> None:
    best = state.best_model or state.model
    extra = {
        "training_config": config.to_dict(),
        "split": split,
        "epoch": state.epoch,
        "best_val": None if not np.isfinite(state.best_val) else state.best_val,
        "best_epoch": state.best_epoch,
        "curve": state.curve,
        "opt": {k: [getattr(s, k) for s in (state.opt_e, state.opt_d)] for k in ("lr", "beta1", "beta2", "eps", "step")},
    }
    arrays = _opt_arrays("opte_", state.opt_e)
    arrays.update(_opt_arrays("optd_", state.opt_d))
    # the live weights are stored alongside the best ones so training can resume
    arrays.update({f"live_enc_{i}": a for i, a in enumerate(state.model.encoder.arrays())})
    arrays.update({f"live_dec_{i}": a for i, a in enumerate(state.model.decoder.arrays())})
    best.save(path, extra, arrays)


def load_training_state(path, geometry: FreewayGeometry | None = None) -> tuple[TrainingState, TrainingConfig, dict]:
    best, meta, arrays = load_checkpoint(path, geometry)
    n_e = 2 * (len(best.encoder_spec.widths) - 1)
    n_d = 2 * (len(best.decoder_spec.widths) - 1)
    live = replace(best, encoder=NetworkWeights.from_arrays(arrays[f"live_enc_{i}"] for i in range(n_e)),
                   decoder=NetworkWeights.from_arrays(arrays[f"live_dec_{i}"] for i in range(n_d)))
    o = meta["opt"]

    def opt(j, prefix, n):
        m = [arrays[f"{prefix}m_{i}"] for i in range(n)] if f"{prefix}m_0" in arrays else None
        v = [arrays[f"{prefix}v_{i}"] for i in range(n)] if f"{prefix}v_0" in arrays else None
        return OptimizerState(o["lr"][j], o["beta1"][j], o["beta2"][j], o["eps"][j], o["step"][j], m, v)

    best_val = meta["best_val"] if meta["best_val"] is not None else np.inf
    state = TrainingState(live, opt(0, "opte_", n_e), opt(1, "optd_", n_d), meta["epoch"], best_val,
                          meta["best_epoch"], best, [tuple(r) for r in meta["curve"]])
    return state, TrainingConfig.from_dict(meta["training_config"]), meta["split"]


def _validation_split(periods: Sequence[PeriodDataset], frac: float, seed: int):
    n_val = int(round(frac * len(periods))) if len(periods) > 1 else 0
    if n_val == 0:
        return list(periods), []
    order = np.random.default_rng(seed + 7919).permutation(len(periods))
    val_idx = set(order[:n_val].tolist())
    return ([p for i, p in enumerate(periods) if i not in val_idx], [p for i, p in enumerate(periods) if i in val_idx])


def train(datasets: Sequence[PeriodDataset], config: TrainingConfig, geometry: FreewayGeometry,
          bounds: ParamBounds, resume: TrainingState | None = None, checkpoint_path=None, on_epoch=None,
          max_epochs: int | None = None) -> tuple[AutoencoderModel, CalibrationResult, TrainingState]:
    """Train encoder and decoder jointly; returns the best model on the validation slice.

    ``max_epochs`` stops after that many epochs in this call (for
    checkpoint/resume); the epoch counter and per-epoch seeds continue
    from ``resume``.
    """
    train_periods = [p for p in datasets if p.split_tag == "train"]
    if not train_periods:
        raise ValueError("no training periods")
    for p in train_periods:
        p.check_geometry(geometry)
    fit_set, val_set = _validation_split(train_periods, config.validation_fraction, config.seed)
    split = {"fit": [p.period_id for p in fit_set], "validation": [p.period_id for p in val_set]}
    if resume is None:
        model = build_model(geometry, bounds, fit_set, config.encoder_hidden, config.decoder_hidden,
                            config.activation, config.seed, config.smoothing, config.mode,
                            zero_encoder=config.freeze_encoder)
        state = TrainingState(model, OptimizerState(lr=config.learning_rate),
                              OptimizerState(lr=config.learning_rate))
    else:
        state = resume
    model = state.model
    pool = ()
    if config.denoising:
        from .data import mask_pool
        pool = mask_pool(model.meas_shape, config.mask_rates, config.mask_pool_size, seed=config.seed + 1)
    steps_done = state.opt_d.step
    stop_at = config.epochs if max_epochs is None else min(config.epochs, state.epoch + max_epochs)
    while state.epoch < stop_at:
        epoch = state.epoch
        rng = np.random.default_rng([config.seed, epoch])
        lr = max(config.learning_rate * config.lr_decay ** epoch, config.min_learning_rate)
        state.opt_e.lr = state.opt_d.lr = lr
        if config.denoising:
            samples = synthesize_denoising_batch(fit_set, pool, rng, size=len(fit_set))
            by_id = {p.period_id: p for p in fit_set}
            epoch_periods = [by_id[s.period_id] for s in samples]
            corrupted = (np.stack([s.corrupted.stacked() for s in samples]),
                         np.stack([s.corrupted.mask.bits for s in samples]))
            order = np.arange(len(samples))
        else:
            epoch_periods = fit_set
            corrupted = None
            order = rng.permutation(len(fit_set))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            sub = [epoch_periods[i] for i in idx]
            cor = None if corrupted is None else (corrupted[0][idx], corrupted[1][idx])
            batch = _make_batch(model, sub, cor)
            full = config.gradient_mode == "full" and steps_done % config.jacobian_every == 0
            total, phys, rec, ge, gd, _ = step_loss_and_grads(model, batch, config.gamma, full,
                                                              config.freeze_encoder)
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps_done}", epoch, steps_done,
                                       state.best_model)
            try:
                if not config.freeze_encoder:
                    model.encoder, state.opt_e = adam_step(model.encoder, ge, state.opt_e)
                model.decoder, state.opt_d = adam_step(model.decoder, gd, state.opt_d)
            except FloatingPointError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}", epoch, steps_done, state.best_model) from e
            steps_done += 1
            sums += np.array([total, phys, rec]) * len(idx)
        train_parts = sums / len(order)
        state.curve.append((epoch, *map(float, train_parts)))
        val_total = _mean_parts(evaluate_loss(model, val_set, config.gamma))[0] if val_set else train_parts[0]
        if val_total < state.best_val:
            state.best_val, state.best_epoch, state.best_model = val_total, epoch, model.copy()
        state.epoch = epoch + 1
        log.info("epoch %d  loss %.4f  physics %.4f  recon %.4f  val %.4f", epoch, *train_parts, val_total)
        if on_epoch is not None:
            on_epoch(state)
        if checkpoint_path is not None:
            save_training_state(state, config, split, checkpoint_path)
        if val_set and epoch - state.best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break
    best = state.best_model or model
    result = calibrate(best, train_periods, config.gamma)
    result.curve = list(state.curve)
    return best, result, state


def calibrate(model: AutoencoderModel, periods: Sequence[PeriodDataset], gamma: float = 0.8,
              geometry: FreewayGeometry | None = None) -> CalibrationResult:
    """Encode every period; losses are reported against the period's own (possibly masked) data."""
    if geometry is not None and geometry.fingerprint() != model.geometry.fingerprint():
        raise ValueError("data geometry does not match the checkpoint geometry")
    if not periods:
        return CalibrationResult({})
    payloads, masks, bfeats = _stack(periods, model.geometry)
    u = encode_batch(model, payloads, masks, bfeats)
    K = model.geometry.cell_count
    thetas = unit_to_vector(u, model.bounds)
    params = {p.period_id: TrafficParams.from_vector(t, K) for p, t in zip(periods, thetas)}
    return CalibrationResult(params, evaluate_loss(model, periods, gamma))


# -- reports -----------------------------------------------------------------------

def calibration_report(result: CalibrationResult, K: int) -> str:
    """CSV text with one row per period; parameter columns carry their units in a comment line."""
    from .domain import PARAM_GROUPS, PARAM_UNITS, group_sizes
    units = []
    for grp, n in zip(PARAM_GROUPS, group_sizes(K)):
        units.extend([PARAM_UNITS[grp]] * n)
    names = param_names(K)
    buf = io.StringIO()
    buf.write("# units: " + ", ".join(f"{n} {u}" for n, u in zip(names, units)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["period_id", "method"] + names)
    for pid, th in result.params.items():
        w.writerow([pid, result.method, *(repr(float(x)) for x in th.to_vector())])
    return buf.getvalue()


def read_calibration_report(path) -> CalibrationResult:
    """Read a calibration report, or any CSV of ``period_id`` plus named parameter columns (e.g. a truth file)."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0] != "period_id":
        raise ValueError(f"{path}: not a parameter table")
    header = rows[0]
    start = 2 if len(header) > 1 and header[1] == "method" else 1
    K = (len(header) - start + 3) // 5
    if header[start:] != param_names(K):
        raise ValueError(f"{path}: unexpected parameter columns")
    params = {r[0]: TrafficParams.from_vector([float(x) for x in r[start:]], K) for r in rows[1:]}
    method = rows[1][1] if start == 2 and len(rows) > 1 else "given"
    return CalibrationResult(params, method=method)
