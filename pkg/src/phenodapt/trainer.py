"""Training orchestration: balanced domain batching, the adversarial and
statistic-alignment variants, validation-based model selection, and the
thermal-time baseline.

Method summary (what each train step optimizes):
  vanilla       masked MSE on source labels.
  miranda       MSE + rank-similarity loss on mid-level token features of both
                domains, through a gradient-reversal layer into the
                discriminator embedding; hybrid norms in the second layer.
  dann          MSE + binary source/target loss on late features through
                gradient reversal.
  danl          dann training with hybrid norms at every normalization site.
  coral         MSE + lambda * covariance-alignment loss on late features.
  adabn         vanilla training with a batch norm before the decoder;
                evaluation adapts its statistics on the eval split's inputs.
  thermal-time  deterministic degree-day grid search, no gradients.

The unlabeled target pool for adaptation methods is supplied by the caller
(inputs only; labels in the pool are never read, which a property test pins).
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as tc
from .tensor import Tensor, Graph, Adam, NonFiniteGradError
from .model import ModelConfig, PhenoFormer, Standardizer
from .losses import RankLossConfig, mse, rank_n_contrast, binary_domain_loss, coral
from .synthdata import Dataset, SpeciesParams, gdd_date, guidance_values, DAY_OFFSET, SERIES_LEN

METHODS = ("miranda", "vanilla", "dann", "coral", "adabn", "danl", "thermal-time")
ADAPTATION_METHODS = ("miranda", "dann", "coral", "danl")
HYBRID_METHODS = ("miranda", "danl")

T_BASE_GRID = np.arange(0.0, 5.01, 0.5)
F_STAR_GRID = np.arange(100.0, 401.0, 20.0)


@dataclass
class TrainConfig:
    method: str = "miranda"
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 300
    tau: float = 0.1
    guidance: str = "year"
    lambda_steepness: float = 10.0
    seed: int = 0
    patience: int = 30
    val_source_holdout: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.method in ADAPTATION_METHODS:
            if self.batch_size % 2 != 0 or self.batch_size < 4:
                raise ValueError(
                    f"{self.method} needs an even batch_size >= 4 "
                    f"(equal domain halves), got {self.batch_size}")
        RankLossConfig(tau=self.tau, guidance=self.guidance)
        self.model.validate()
        return self


@dataclass
class RunResult:
    method: str
    seed: int
    best_epoch: int
    epochs_run: int
    best_val_rmse: float
    curves: list
    wall_time: float
    model: PhenoFormer | None = None
    checkpoint_path: str | None = None
    aborted: bool = False
    abort_reason: str | None = None


def lambda_schedule(progress: float, steepness: float = 10.0) -> float:
    """Warm-up weight 2/(1+exp(-steepness*p)) - 1, increasing from 0 on [0,1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + np.exp(-steepness * progress)) - 1.0


# ---------------------------------------------------------------------------
# batching


def make_balanced_batches(n_source: int, n_target: int, batch_size: int,
                          rng: np.random.Generator):
    """Index pairs (src, tgt) per batch, each half batch_size//2.

    One epoch passes once over the larger domain; the smaller one is cycled
    with per-cycle reshuffling. A trailing partial batch is dropped.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError(f"both domains must be nonempty, got {n_source}/{n_target}")
    half = batch_size // 2
    n_batches = max(n_source, n_target) // half
    if n_batches < 1:
        raise ValueError(f"batch_size {batch_size} exceeds both domain sizes "
                         f"({n_source} source, {n_target} target)")

    def stream(n, need):
        chunks = []
        while sum(len(c) for c in chunks) < need:
            chunks.append(rng.permutation(n))
        return np.concatenate(chunks)[:need]

    need = n_batches * half
    src = stream(n_source, need)
    tgt = stream(n_target, need)
    return [(src[i * half:(i + 1) * half], tgt[i * half:(i + 1) * half])
            for i in range(n_batches)]


def make_source_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled full batches; a dataset smaller than one batch trains whole."""
    if n < 1:
        raise ValueError("empty dataset")
    perm = rng.permutation(n)
    if n < batch_size:
        return [perm]
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n // batch_size)]


# ---------------------------------------------------------------------------
# model construction and standardization


def build_model(cfg: TrainConfig) -> PhenoFormer:
    variants = {
        "vanilla": dict(hln_sites="none"),
        "miranda": dict(hln_sites="t2", disc_site="mid"),
        "dann": dict(hln_sites="none", disc_site="late"),
        "danl": dict(hln_sites="all", disc_site="late"),
        "coral": dict(hln_sites="none"),
        "adabn": dict(hln_sites="none", adabn=True),
    }
    if cfg.method not in variants:
        raise ValueError(f"no network for method {cfg.method!r}")
    return PhenoFormer(cfg.model, seed=cfg.seed, **variants[cfg.method])


def fit_standardizer(train: Dataset) -> Standardizer:
    chan_mean = train.x.mean(axis=(0, 2))
    chan_std = np.maximum(train.x.std(axis=(0, 2)), 1e-8)
    labels = train.y[np.isfinite(train.y)]
    if labels.size == 0:
        raise ValueError("training split has no labels")
    y_std = max(float(labels.std()), 1e-8)
    return Standardizer(chan_mean, chan_std, float(labels.mean()), y_std)


# ---------------------------------------------------------------------------
# train steps


@dataclass
class Batch:
    """One standardized training batch, rows in (B, T, C) orientation."""

    x_src: np.ndarray
    y_src: np.ndarray                 # standardized labels, NaN = missing
    g_src: np.ndarray | None = None   # guidance values, source half
    x_tgt: np.ndarray | None = None
    g_tgt: np.ndarray | None = None


@dataclass
class StepLosses:
    mse: float
    aux: float
    total: float


def _flat_tokens(t: Tensor) -> Tensor:
    b, s, d = t.data.shape
    return tc.reshape(t, (b, s * d))


def train_step(model: PhenoFormer, opt: Adam, method: str, batch: Batch,
               lam: float, rank_cfg: RankLossConfig) -> StepLosses:
    """One optimizer step; the source half always runs first so hybrid
    statistics exist before the target half reads them."""
    opt.zero_grad()
    with Graph():
        pred, z_s, g_s = model.forward_core(batch.x_src, "source-train")
        loss_mse = mse(batch.y_src, pred)
        if method in ("vanilla", "adabn"):
            aux = None
            backward_loss = loss_mse
        elif method == "coral":
            _, _, g_t = model.forward_core(batch.x_tgt, "target-eval")
            aux = coral(_flat_tokens(g_s), _flat_tokens(g_t))
            backward_loss = tc.add(loss_mse, tc.mul(aux, lam))
        elif method in ("dann", "danl"):
            _, _, g_t = model.forward_core(batch.x_tgt, "target-eval")
            feats = tc.concat([g_s, g_t], axis=0)
            logits = model._disc_rows(tc.grad_reverse(feats, lam))
            domain = np.r_[np.zeros(len(batch.x_src)), np.ones(len(batch.x_tgt))]
            aux = binary_domain_loss(logits, domain)
            backward_loss = tc.add(loss_mse, aux)
        elif method == "miranda":
            _, z_t, _ = model.forward_core(batch.x_tgt, "target-eval")
            feats = tc.concat([z_s, z_t], axis=0)
            emb = model._disc_rows(tc.grad_reverse(feats, lam))
            n_s = len(batch.x_src)
            emb_s = tc.narrow(emb, 0, 0, n_s)
            emb_t = tc.narrow(emb, 0, n_s, n_s + len(batch.x_tgt))
            aux = tc.add(rank_n_contrast(emb_s, batch.g_src, rank_cfg),
                         rank_n_contrast(emb_t, batch.g_tgt, rank_cfg))
            backward_loss = tc.add(loss_mse, aux)
        else:
            raise ValueError(f"no train step for method {method!r}")
        tc.backward(backward_loss)
    opt.step()
    aux_v = aux.item() if aux is not None else 0.0
    return StepLosses(mse=loss_mse.item(), aux=aux_v,
                      total=loss_mse.item() + lam * aux_v)


# ---------------------------------------------------------------------------
# evaluation


def rmse_by_species(pred: np.ndarray, y: np.ndarray) -> float:
    """Root-mean-square error per species on labeled entries, averaged."""
    per = []
    for s in range(y.shape[1]):
        m = np.isfinite(y[:, s])
        if m.any():
            per.append(float(np.sqrt(np.mean((pred[m, s] - y[m, s]) ** 2))))
    if not per:
        raise ValueError("no finite labels to evaluate")
    return float(np.mean(per))


def evaluate(model: PhenoFormer, ds: Dataset, mode: str, adapt: bool = False,
             batch: int = 32) -> float:
    """Validation metric: species-mean RMSE in day units.

    adapt=True (batch-norm models) first re-estimates normalization
    statistics on this split's inputs, then restores the training ones.
    """
    if adapt:
        if model.bn is None:
            raise ValueError("adapt=True requires the batch-norm variant")
        saved = (model.bn.run_mean.copy(), model.bn.run_var.copy(), model.bn.initialized)
        model.adapt_norm_stats(ds.x, batch=batch)
        try:
            return rmse_by_species(model.predict(ds.x, mode=mode, batch=batch), ds.y)
        finally:
            model.bn.run_mean, model.bn.run_var, model.bn.initialized = saved
    return rmse_by_species(model.predict(ds.x, mode=mode, batch=batch), ds.y)


def eval_mode_for(cfg: TrainConfig, target_domain: bool) -> str:
    if cfg.method in HYBRID_METHODS and target_domain:
        return "target-eval"
    return "source-eval"


def predict_for_method(model: PhenoFormer, method: str, x: np.ndarray,
                       batch: int = 32) -> np.ndarray:
    """Test-time predictions with the method's evaluation protocol:
    hybrid methods read source statistics, the batch-norm method first
    adapts its statistics on the eval inputs (restored afterwards)."""
    if method == "adabn":
        saved = (model.bn.run_mean.copy(), model.bn.run_var.copy(), model.bn.initialized)
        model.adapt_norm_stats(x, batch=batch)
        try:
            return model.predict(x, mode="source-eval", batch=batch)
        finally:
            model.bn.run_mean, model.bn.run_var, model.bn.initialized = saved
    mode = "target-eval" if method in HYBRID_METHODS else "source-eval"
    return model.predict(x, mode=mode, batch=batch)


# ---------------------------------------------------------------------------
# model snapshot (best-epoch selection without disk round trips)


def _snapshot(model: PhenoFormer):
    params = {k: p.data.copy() for k, p in model.params().items()}
    hln = [(ln.mu_s, ln.sigma_s, ln.initialized) for _, ln in model._hybrid_sites()]
    bn = None
    if model.bn is not None:
        bn = (model.bn.run_mean.copy(), model.bn.run_var.copy(), model.bn.initialized)
    return params, hln, bn


def _restore(model: PhenoFormer, snap):
    params, hln, bn = snap
    for k, p in model.params().items():
        p.data[...] = params[k]
    for (_, ln), state in zip(model._hybrid_sites(), hln):
        ln.mu_s, ln.sigma_s, ln.initialized = state
    if bn is not None:
        model.bn.run_mean, model.bn.run_var, model.bn.initialized = \
            bn[0].copy(), bn[1].copy(), bn[2]


# ---------------------------------------------------------------------------
# the fit loop


def fit(train: Dataset, val: Dataset, cfg: TrainConfig,
        target_pool: Dataset | None = None, run_dir=None) -> RunResult:
    """Train one run to the best-validation epoch.

    target_pool supplies unlabeled inputs (and input-side guidance metadata)
    for the adaptation methods; its labels are never read. Artifacts, when
    run_dir is given: config.json, epochs.csv, checkpoint.npz, result.json.
    """
    cfg.validate()
    if cfg.method == "thermal-time":
        raise ValueError("thermal-time has no gradient fit; use fit_thermal_time")
    t0 = time.perf_counter()
    adaptation = cfg.method in ADAPTATION_METHODS
    if adaptation and (target_pool is None or len(target_pool) == 0):
        raise ValueError(f"{cfg.method} needs a nonempty unlabeled target pool")

    std = fit_standardizer(train)
    model = build_model(cfg)
    model.standardizer = std
    opt = Adam(model.params(), lr=cfg.lr)
    rank_cfg = RankLossConfig(tau=cfg.tau, guidance=cfg.guidance)

    xs = np.ascontiguousarray(std.apply_x(train.x).transpose(0, 2, 1))
    ys = std.apply_y(train.y)
    g_src = guidance_values(train, cfg.guidance)
    if adaptation:
        xt = np.ascontiguousarray(std.apply_x(target_pool.x).transpose(0, 2, 1))
        g_tgt = guidance_values(target_pool, cfg.guidance)
        steps_per_epoch = max(len(train), len(target_pool)) // (cfg.batch_size // 2)
    else:
        steps_per_epoch = max(len(train) // cfg.batch_size, 1)
    planned = cfg.max_epochs * steps_per_epoch
    val_mode = eval_mode_for(cfg, target_domain=not cfg.val_source_holdout)

    curves = []
    best = (np.inf, 0, None)   # (val_rmse, epoch, snapshot)
    done = 0
    aborted, reason = False, None
    for epoch in range(1, cfg.max_epochs + 1):
        erng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        if adaptation:
            batches = [Batch(xs[si], ys[si], g_src[si], xt[ti], g_tgt[ti])
                       for si, ti in make_balanced_batches(
                           len(train), len(target_pool), cfg.batch_size, erng)]
        else:
            batches = [Batch(xs[si], ys[si])
                       for si in make_source_batches(len(train), cfg.batch_size, erng)]
        ep_mse, ep_aux = [], []
        try:
            for b in batches:
                lam = float(lambda_schedule(done / planned, cfg.lambda_steepness))
                losses = train_step(model, opt, cfg.method, b, lam, rank_cfg)
                if not np.isfinite(losses.total):
                    raise NonFiniteGradError(f"loss={losses.total}")
                done += 1
                ep_mse.append(losses.mse)
                ep_aux.append(losses.aux)
        except NonFiniteGradError as exc:
            aborted, reason = True, f"non-finite loss at epoch {epoch}: {exc}"
            break
        val_rmse = evaluate(model, val, val_mode, adapt=(cfg.method == "adabn"))
        curves.append({"epoch": epoch, "train_mse": float(np.mean(ep_mse)),
                       "train_rank": float(np.mean(ep_aux)), "val_rmse": val_rmse})
        if val_rmse < best[0]:
            best = (val_rmse, epoch, _snapshot(model))
        if epoch - best[1] >= cfg.patience:
            break

    if best[2] is not None:
        _restore(model, best[2])
    result = RunResult(
        method=cfg.method, seed=cfg.seed, best_epoch=best[1],
        epochs_run=len(curves), best_val_rmse=float(best[0]), curves=curves,
        wall_time=time.perf_counter() - t0, model=model,
        aborted=aborted, abort_reason=reason)
    if run_dir is not None:
        _write_run_dir(Path(run_dir), cfg, model, result)
    return result


def _write_run_dir(run_dir: Path, cfg: TrainConfig, model: PhenoFormer,
                   result: RunResult):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    with open(run_dir / "epochs.csv", "w") as fh:
        fh.write("epoch,train_mse,train_rank,val_rmse\n")
        for row in result.curves:
            fh.write(f"{row['epoch']},{row['train_mse']!r},"
                     f"{row['train_rank']!r},{row['val_rmse']!r}\n")
    ckpt = run_dir / "checkpoint.npz"
    model.save(ckpt)
    result.checkpoint_path = str(ckpt)
    summary = {"method": result.method, "seed": result.seed,
               "best_epoch": result.best_epoch, "epochs_run": result.epochs_run,
               "best_val_rmse": (result.best_val_rmse
                                 if np.isfinite(result.best_val_rmse) else None),
               "aborted": result.aborted,
               "abort_reason": result.abort_reason,
               "wall_time_sec": round(result.wall_time, 3)}
    (run_dir / "result.json").write_text(json.dumps(summary, indent=2) + "\n")


# ---------------------------------------------------------------------------
# thermal-time baseline


def _gdd_dates_vector(temps: np.ndarray, t_base: float, f_star_grid: np.ndarray,
                      start_day: int) -> np.ndarray:
    """Predicted day-of-year for every f_star in the grid, one climate series."""
    acc = np.cumsum(np.maximum(temps[start_day:] - t_base, 0.0))
    idx = np.searchsorted(acc, f_star_grid, side="left")
    never = idx >= len(acc)
    idx = np.where(never, len(acc) - 1, idx)
    return (start_day + idx) + DAY_OFFSET


def fit_thermal_time(train: Dataset, t_base_grid=T_BASE_GRID,
                     f_star_grid=F_STAR_GRID, start_day: int = 101):
    """Grid-search degree-day parameters per species, minimizing train RMSE.

    Species with no labeled samples are skipped (None entry) with a warning.
    Ties keep the first grid point in (t_base, f_star) iteration order.
    """
    t_base_grid = np.atleast_1d(np.asarray(t_base_grid, dtype=np.float64))
    f_star_grid = np.atleast_1d(np.asarray(f_star_grid, dtype=np.float64))
    n, n_species = train.y.shape
    fitted = []
    for s in range(n_species):
        m = np.isfinite(train.y[:, s])
        if not m.any():
            warnings.warn(f"species {s + 1}: no labeled samples, skipping")
            fitted.append(None)
            continue
        labels = train.y[m, s]
        temps = train.x[m, 0, :]
        best = (np.inf, None)
        for tb in t_base_grid:
            pred = np.stack([_gdd_dates_vector(temps[i], tb, f_star_grid, start_day)
                             for i in range(len(labels))])
            rmses = np.sqrt(np.mean((pred - labels[:, None]) ** 2, axis=0))
            j = int(np.argmin(rmses))
            if rmses[j] < best[0]:
                best = (float(rmses[j]), SpeciesParams(
                    t_base=float(tb), f_star=float(f_star_grid[j]),
                    start_day=start_day, sigma_obs=0.0))
        fitted.append(best[1])
    return fitted


def predict_thermal_time(x: np.ndarray, species: list) -> np.ndarray:
    """(N, C, T) series -> (N, S) day-of-year predictions.

    A never-reached threshold predicts the window end; unfitted species
    stay NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.full((x.shape[0], len(species)), np.nan)
    for s, sp in enumerate(species):
        if sp is None:
            continue
        for i in range(x.shape[0]):
            d = gdd_date(x[i, 0], sp)
            out[i, s] = (SERIES_LEN - 1 if d is None else d) + DAY_OFFSET
    return out
