"""Adam training of quantization tables and attention logits through the surrogate."""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel

from src.models.errors import DivergenceError, NonFiniteError
from src.models.experiment import LossReport, LossWeights, OptimizedParams, TrainConfig, TrainMode
from src.models.image import BLOCK, ImagePlanes, QuantTablePair
from src.models.params import AdamState, AttentionMaps, GradientSet, SurrogateParams
from src.services.diff_jpeg import surrogate_backward, surrogate_forward
from src.services.metrics import mse_gradient, rate_gradients, total_loss

ParamGroups = Dict[str, np.ndarray]

TABLE_GROUPS = ("q_luma", "q_chroma")
TABLE_MIN = 1.0
TABLE_MAX = 255.0


# =============================================================================
# Parameters <-> optimizer groups
# =============================================================================

def init_params(grid: Tuple[int, int], config: TrainConfig) -> SurrogateParams:
    """
    Initial θ for a block grid.

    Tables are drawn uniformly in [1s, 2s] from the seeded generator; attention
    logits start at 0 (A = 0.5) in modes that learn attention, else A ≡ 1.
    """
    blocks_y, blocks_x = grid
    if blocks_y < 1 or blocks_x < 1:
        raise ValueError(f"invalid block grid {grid}")
    s = config.scale_s
    rng = np.random.default_rng(config.seed)
    luma = rng.uniform(TABLE_MIN * s, 2.0 * s, size=(BLOCK, BLOCK))
    chroma = rng.uniform(TABLE_MIN * s, 2.0 * s, size=(BLOCK, BLOCK))
    attention = AttentionMaps.neutral(blocks_y, blocks_x) if config.mode.learns_attention else None
    return SurrogateParams(
        tables=QuantTablePair(luma=luma, chroma=chroma, scale_s=s),
        attention=attention,
    )


def params_to_groups(params: SurrogateParams, attention_scale: float) -> ParamGroups:
    """Flatten θ into optimizer groups; logits are carried multiplied by attention_scale."""
    groups = {"q_luma": params.tables.luma.copy(), "q_chroma": params.tables.chroma.copy()}
    if params.attention is not None:
        groups["logits_luma"] = params.attention.logits_luma * attention_scale
        groups["logits_chroma"] = params.attention.logits_chroma * attention_scale
    return groups


def groups_to_params(groups: ParamGroups, scale_s: float, attention_scale: float) -> SurrogateParams:
    attention = None
    if "logits_luma" in groups:
        attention = AttentionMaps(
            logits_luma=groups["logits_luma"] / attention_scale,
            logits_chroma=groups["logits_chroma"] / attention_scale,
        )
    return SurrogateParams(
        tables=QuantTablePair(luma=groups["q_luma"], chroma=groups["q_chroma"], scale_s=scale_s),
        attention=attention,
    )


def gradients_to_groups(grads: GradientSet, attention_scale: float) -> ParamGroups:
    out = dict(grads.groups())
    for key in ("logits_luma", "logits_chroma"):
        if key in out:
            out[key] = out[key] / attention_scale
    return out


def project_params(params: ParamGroups, scale_s: float) -> ParamGroups:
    """Clamp scaled table parameters to [1s, 255s]; logits pass through."""
    projected = dict(params)
    for key in TABLE_GROUPS:
        projected[key] = np.clip(params[key], TABLE_MIN * scale_s, TABLE_MAX * scale_s)
    return projected


# =============================================================================
# Adam
# =============================================================================

def adam_step(
    state: AdamState,
    params: ParamGroups,
    grads: ParamGroups,
) -> Tuple[ParamGroups, AdamState]:
    """
    One bias-corrected Adam update over all groups with a single learning rate.

    Raises:
        NonFiniteError: a gradient entry is NaN/inf (names group and coordinate)
        ValueError: group names or shapes disagree
    """
    if set(params) != set(grads):
        raise ValueError(f"parameter groups {sorted(params)} do not match gradients {sorted(grads)}")
    for key, g in grads.items():
        if g.shape != params[key].shape:
            raise ValueError(f"gradient {key} has shape {g.shape}, parameter has {params[key].shape}")
        bad = np.argwhere(~np.isfinite(g))
        if bad.size:
            raise NonFiniteError(f"gradient {key}", tuple(int(i) for i in bad[0]))

    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    first, second, updated = {}, {}, {}
    for key, g in grads.items():
        m = state.first_moment.get(key, np.zeros_like(g))
        v = state.second_moment.get(key, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        first[key], second[key] = m, v
        denom = np.sqrt(v / bc2) + state.epsilon
        updated[key] = params[key] - state.learning_rate * (m / bc1) / denom

    new_state = state.model_copy(
        update={"first_moment": first, "second_moment": second, "step_count": t}
    )
    return updated, new_state


class AdamOptimizer:
    """Stateful wrapper around adam_step."""

    def __init__(
        self,
        learning_rate: float = 1e-6,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.state = AdamState(
            learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon
        )

    def step(self, params: ParamGroups, grads: ParamGroups) -> ParamGroups:
        updated, self.state = adam_step(self.state, params, grads)
        return updated


# =============================================================================
# Objective
# =============================================================================

def loss_and_gradients(
    image: ImagePlanes,
    params: SurrogateParams,
    weights: LossWeights,
    smooth: bool = False,
) -> Tuple[LossReport, GradientSet]:
    """Forward, objective and backward for one image."""
    x_hat, _, tape = surrogate_forward(image, params, smooth=smooth)
    report = total_loss(image, x_hat, params, weights)
    upstream = weights.lambda_ * mse_gradient(image, x_hat)
    grads = surrogate_backward(tape, upstream) + rate_gradients(params, weights)
    return report, grads


def batch_gradients(
    crops: Sequence[ImagePlanes],
    params: SurrogateParams,
    weights: LossWeights,
    max_workers: int = 1,
) -> Tuple[LossReport, GradientSet]:
    """
    Summed gradients over a batch (rate term included once per crop).

    The report averages distortion over the batch; rate terms do not depend
    on the crop. Summation runs in crop order.
    """
    if not crops:
        raise ValueError("empty batch")

    def run(crop: ImagePlanes) -> Tuple[LossReport, GradientSet]:
        return loss_and_gradients(crop, params, weights)

    if max_workers > 1 and len(crops) > 1:
        with ThreadPoolExecutor(max_workers=min(max_workers, len(crops))) as executor:
            results = list(executor.map(run, crops))
    else:
        results = [run(crop) for crop in crops]

    grads = results[0][1]
    for _, g in results[1:]:
        grads = grads + g

    first = results[0][0]
    distortion = float(np.mean([r.distortion_mse for r, _ in results]))
    perceptual = float(np.mean([r.perceptual for r, _ in results]))
    total = weights.lambda_ * distortion + first.rate_q + first.rate_attention
    if weights.gamma > 0:
        total += weights.gamma * perceptual
    report = LossReport(
        total=total,
        distortion_mse=distortion,
        rate_q=first.rate_q,
        rate_attention=first.rate_attention,
        rate_total=first.rate_total,
        perceptual=perceptual,
    )
    return report, grads.tables_only()


def _check_step_invariants(step: int, report: LossReport, weights: LossWeights, params: SurrogateParams) -> None:
    expected = weights.lambda_ * report.distortion_mse + report.rate_q + report.rate_attention
    if weights.gamma > 0:
        expected += weights.gamma * report.perceptual
    if not math.isclose(report.total, expected, rel_tol=1e-12, abs_tol=1e-12):
        raise AssertionError(f"step {step}: loss decomposition broken ({report.total} != {expected})")
    for table in (params.tables.effective_luma, params.tables.effective_chroma):
        if table.min() < TABLE_MIN - 1e-9 or table.max() > TABLE_MAX + 1e-9:
            raise AssertionError(f"step {step}: effective table left [1, 255]")


def _update(
    optimizer: AdamOptimizer,
    params: SurrogateParams,
    grads: GradientSet,
    config: TrainConfig,
) -> SurrogateParams:
    groups = params_to_groups(params, config.attention_scale)
    groups = optimizer.step(groups, gradients_to_groups(grads, config.attention_scale))
    groups = project_params(groups, config.scale_s)
    return groups_to_params(groups, config.scale_s, config.attention_scale)


def _log_step(step: int, config: TrainConfig, report: LossReport, trace: List[LossReport]) -> None:
    if step == 1 or step % config.log_every == 0 or step == config.steps:
        trace.append(report)
        logger.debug(
            f"step {step}/{config.steps}: total={report.total:.6f} "
            f"mse={report.distortion_mse:.4f} rate_q={report.rate_q:.4f} "
            f"rate_a={report.rate_attention:.4f}"
        )


# =============================================================================
# Training loops
# =============================================================================

def train_per_image(image: ImagePlanes, lam: float, config: TrainConfig) -> OptimizedParams:
    """
    Optimize θ for one full image (batch of 1).

    Args:
        image: Padded input raster
        lam: Rate-distortion tradeoff λ
        config: Hyperparameters; mode must be per-image-qa or per-image-q

    Returns:
        Final parameters with the final loss report and a sparse loss trace

    Raises:
        DivergenceError: the loss became non-finite
    """
    if config.mode is TrainMode.CORPUS_Q:
        raise ValueError("train_per_image needs a per-image mode")
    weights = config.weights_for(lam)
    params = init_params((image.blocks_y, image.blocks_x), config)
    optimizer = AdamOptimizer(learning_rate=config.learning_rate)
    trace: List[LossReport] = []

    logger.info(
        f"Per-image training ({config.mode.value}): λ={lam:g}, {config.steps} steps, "
        f"{image.width}x{image.height}"
    )
    for step in range(1, config.steps + 1):
        try:
            report, grads = loss_and_gradients(image, params, weights)
        except NonFiniteError as e:
            raise DivergenceError(step, math.nan) from e
        _log_step(step, config, report, trace)

        params = _update(optimizer, params, grads, config)
        if config.check_invariants:
            _check_step_invariants(step, report, weights, params)

    try:
        final, _ = loss_and_gradients(image, params, weights)
    except NonFiniteError as e:
        raise DivergenceError(config.steps, math.nan) from e

    logger.info(f"Per-image training done: λ={lam:g}, loss={final.total:.6f}")
    return OptimizedParams(
        params=params,
        lambda_=lam,
        steps=config.steps,
        seed=config.seed,
        mode=config.mode,
        report=final,
        trace=trace,
    )


def sample_crops(
    dataset: Sequence[ImagePlanes],
    crop_size: int,
    batch_size: int,
    seed: int,
    step: int,
) -> List[ImagePlanes]:
    """Uniform random crops (images drawn with replacement), reproducible per (seed, step)."""
    rng = np.random.default_rng([seed, step])
    crops = []
    for index in rng.integers(len(dataset), size=batch_size):
        image = dataset[int(index)]
        top = int(rng.integers(0, image.height - crop_size + 1))
        left = int(rng.integers(0, image.width - crop_size + 1))
        pixels = image.cropped()[top:top + crop_size, left:left + crop_size]
        crops.append(ImagePlanes.from_array(pixels))
    return crops


def train_qtables_corpus(
    dataset: Sequence[ImagePlanes],
    lam: float,
    config: TrainConfig,
    max_workers: int = 1,
) -> OptimizedParams:
    """
    Learn one pair of tables for a whole dataset, attention fixed at 1.

    Images smaller than the crop size are skipped with a warning.

    Raises:
        ValueError: no usable image
        DivergenceError: the loss became non-finite
    """
    crop = config.crop_size
    usable = []
    for index, image in enumerate(dataset):
        if image.width < crop or image.height < crop:
            logger.warning(
                f"Skipping image #{index} ({image.width}x{image.height}): smaller than crop {crop}"
            )
            continue
        usable.append(image)
    if not usable:
        raise ValueError(f"no image in the dataset is at least {crop}x{crop}")

    corpus_config = config.model_copy(update={"mode": TrainMode.CORPUS_Q})
    weights = config.weights_for(lam)
    grid = crop // BLOCK
    params = init_params((grid, grid), corpus_config)
    optimizer = AdamOptimizer(learning_rate=config.learning_rate)
    trace: List[LossReport] = []

    logger.info(
        f"Corpus table training: λ={lam:g}, {config.steps} steps, "
        f"{len(usable)} images, batch {config.batch_size}x{crop}px"
    )
    crops: List[ImagePlanes] = []
    for step in range(1, config.steps + 1):
        crops = sample_crops(usable, crop, config.batch_size, config.seed, step)
        try:
            report, grads = batch_gradients(crops, params, weights, max_workers)
        except NonFiniteError as e:
            raise DivergenceError(step, math.nan) from e
        _log_step(step, corpus_config, report, trace)

        params = _update(optimizer, params, grads, corpus_config)
        if config.check_invariants:
            _check_step_invariants(step, report, weights, params)

    try:
        final, _ = batch_gradients(crops, params, weights, max_workers)
    except NonFiniteError as e:
        raise DivergenceError(config.steps, math.nan) from e

    logger.info(f"Corpus training done: λ={lam:g}, loss={final.total:.6f}")
    return OptimizedParams(
        params=params,
        lambda_=lam,
        steps=config.steps,
        seed=config.seed,
        mode=TrainMode.CORPUS_Q,
        report=final,
        trace=trace,
    )


# =============================================================================
# Gradient checking
# =============================================================================

class GradCheckReport(BaseModel):
    checked: int
    skipped: int
    max_rel_error: float
    worst: Optional[str] = None


def _affected_pre_round(u: np.ndarray, key: str, index: Tuple[int, ...]) -> np.ndarray:
    """Pre-round values a parameter coordinate feeds into."""
    channels = (0,) if key.endswith("luma") else (1, 2)
    if key.startswith("q_"):
        i, j = index
        return np.concatenate([u[c, :, :, i, j].ravel() for c in channels])
    return np.array([u[(c,) + index] for c in channels])


def finite_difference_check(
    image: ImagePlanes,
    params: SurrogateParams,
    weights: LossWeights,
    num_coords: int = 1000,
    h: float = 1e-4,
    tie_margin: float = 0.01,
    atol: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences on the cubic-surrogate loss.

    Table coordinates are perturbed by h·s in scaled space, logits by h.
    Coordinates feeding a pre-round value within tie_margin of a half-integer,
    or whose perturbation would leave [1, 255], are skipped. Relative errors are
    taken against max(|analytic|, |numeric|, atol).
    """
    s = params.tables.scale_s
    _, grads = loss_and_gradients(image, params, weights, smooth=True)
    _, _, tape = surrogate_forward(image, params, smooth=True)
    analytic = grads.groups()
    base = params_to_groups(params, attention_scale=1.0)

    coords = [(key, idx) for key, arr in base.items() for idx in np.ndindex(arr.shape)]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(num_coords, len(coords)), replace=False)

    def loss_at(groups: ParamGroups) -> float:
        candidate = groups_to_params(groups, s, attention_scale=1.0)
        x_hat, _, _ = surrogate_forward(image, candidate, smooth=True)
        return total_loss(image, x_hat, candidate, weights).total

    checked = skipped = 0
    max_rel, worst = 0.0, None
    for pick in sorted(int(p) for p in picks):
        key, idx = coords[pick]
        step = h * s if key.startswith("q_") else h

        u = _affected_pre_round(tape.pre_round, key, idx)
        near_tie = np.abs(np.abs(u - np.floor(u)) - 0.5) < tie_margin
        if key.startswith("q_"):
            effective = base[key][idx] / s
            out_of_range = effective - h < TABLE_MIN or effective + h > TABLE_MAX
        else:
            out_of_range = False
        if near_tie.any() or out_of_range:
            skipped += 1
            continue

        plus = {k: v.copy() for k, v in base.items()}
        minus = {k: v.copy() for k, v in base.items()}
        plus[key][idx] += step
        minus[key][idx] -= step
        numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * step)
        exact = float(analytic[key][idx])

        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
        checked += 1
        if rel > max_rel:
            max_rel, worst = rel, f"{key}{idx}: analytic={exact:.6e} numeric={numeric:.6e}"

    logger.info(f"Gradient check: {checked} coordinates, {skipped} skipped, max rel error {max_rel:.2e}")
    return GradCheckReport(checked=checked, skipped=skipped, max_rel_error=max_rel, worst=worst)
