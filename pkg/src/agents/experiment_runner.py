"""Experiment orchestration: baseline sweeps, optimization jobs, evaluation and CSV output."""

import csv
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.models.config import get_settings
from src.models.errors import QTuneError
from src.models.experiment import (
    ExperimentRecord,
    OptimizedParams,
    RecordMode,
    TrainConfig,
    TrainMode,
)
from src.models.image import ImagePlanes, JfifFile
from src.services.diff_jpeg import attention_summary, smoothed_reconstruction
from src.services.jfif_codec import (
    EncodeResult,
    compute_bpp,
    decode_jfif,
    encode_baseline,
    encode_image,
    reconstruct,
)
from src.services.metrics import MS_SSIM_MIN_SIDE, ms_ssim, psnr, spearman
from src.services.optimizer import (
    finite_difference_check,
    init_params,
    train_per_image,
    train_qtables_corpus,
)
from src.utils.image_io import image_id, list_images, load_image, save_rgb_png

T = TypeVar("T")

GRAD_CHECK_SIZE = 24
PROXY_COMPONENTS = ("rate_q", "rate_attention", "combined")


class RateProxyRow(BaseModel):
    image_id: str
    mode: RecordMode
    setting: float
    rate_q: float
    rate_attention: float
    combined: float
    true_bpp: float


class RateProxyReport(BaseModel):
    """Rate-proxy/bpp pairs and their Spearman correlations, keyed by image_id then component."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: List[RateProxyRow]
    correlations: Dict[str, Dict[str, Optional[float]]]


def sort_records(records: Sequence[ExperimentRecord]) -> List[ExperimentRecord]:
    return sorted(records, key=lambda r: (r.image_id, r.mode.value, r.setting))


def write_records_csv(records: Sequence[ExperimentRecord], path: Union[str, Path]) -> Path:
    """Write records in (image_id, mode, setting) order with a fixed header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ExperimentRecord.csv_header(), lineterminator="\n")
        writer.writeheader()
        for record in sort_records(records):
            writer.writerow(record.to_csv_row())
    logger.info(f"Wrote {len(records)} records to {path}")
    return path


def read_records_csv(path: Union[str, Path]) -> List[ExperimentRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [ExperimentRecord.from_csv_row(row) for row in csv.DictReader(f)]


def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    if not values or any(v is None for v in values):
        return None
    return float(np.mean(values))


def average_records(records: Sequence[ExperimentRecord]) -> List[ExperimentRecord]:
    """
    One test-set average per (mode, setting).

    Failed rows and existing averages are ignored. Average rows carry
    image_id "__mean__" and pixel_count 0.
    """
    groups: Dict[Tuple[RecordMode, float], List[ExperimentRecord]] = defaultdict(list)
    for record in records:
        if record.error is None and record.image_id != ExperimentRecord.MEAN_ID:
            groups[(record.mode, record.setting)].append(record)

    averages = []
    for (mode, setting), members in sorted(groups.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        seeds = {m.seed for m in members}
        averages.append(
            ExperimentRecord(
                image_id=ExperimentRecord.MEAN_ID,
                mode=mode,
                setting=setting,
                bpp=float(np.mean([m.bpp for m in members])),
                psnr_db=float(np.mean([m.psnr_db for m in members])),
                ms_ssim=_mean_or_none([m.ms_ssim for m in members]),
                rate_q=_mean_or_none([m.rate_q for m in members]),
                rate_attention=_mean_or_none([m.rate_attention for m in members]),
                file_bytes=int(round(np.mean([m.file_bytes for m in members]))),
                pixel_count=0,
                seed=seeds.pop() if len(seeds) == 1 else None,
            )
        )
    return averages


def select_lambda_for_bpp(
    records: Sequence[ExperimentRecord],
    target_bpp: float,
    mode: Optional[RecordMode] = None,
) -> Dict[str, ExperimentRecord]:
    """Per image, the record whose bpp is closest to target_bpp (ties go to the smaller setting)."""
    best: Dict[str, ExperimentRecord] = {}
    for record in records:
        if record.error is not None or record.image_id == ExperimentRecord.MEAN_ID:
            continue
        if mode is not None and record.mode != mode:
            continue
        current = best.get(record.image_id)
        key = (abs(record.bpp - target_bpp), record.setting)
        if current is None or key < (abs(current.bpp - target_bpp), current.setting):
            best[record.image_id] = record
    return best


def _failed_record(name: str, mode: RecordMode, setting: float, seed: Optional[int], error: Exception) -> ExperimentRecord:
    return ExperimentRecord(
        image_id=name,
        mode=mode,
        setting=setting,
        bpp=0.0,
        psnr_db=0.0,
        file_bytes=0,
        seed=seed,
        error=f"{type(error).__name__}: {error}",
    )


class ExperimentRunner:
    """
    Runs experiment commands over a set of images.

    Jobs are independent (image, setting) pairs executed on a thread pool
    capped by QTUNE_THREADS; records are sorted before they are written.
    """

    def __init__(self, threads: Optional[int] = None):
        self.settings = get_settings()
        self.threads = max(1, threads or self.settings.threads)
        self.stats = {"success": 0, "failed": 0, "total": 0}
        logger.info(f"Experiment runner initialized ({self.threads} threads)")

    def _run_jobs(self, fn: Callable[..., T], jobs: Sequence[tuple]) -> List[T]:
        if self.threads == 1 or len(jobs) <= 1:
            return [fn(*job) for job in jobs]
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            return list(executor.map(lambda job: fn(*job), jobs))

    def _tally(self, records: Sequence[ExperimentRecord]) -> None:
        self.stats["total"] += len(records)
        failed = sum(1 for r in records if r.error is not None)
        self.stats["failed"] += failed
        self.stats["success"] += len(records) - failed

    def _load_all(self, paths: Sequence[Path]) -> Dict[str, Union[ImagePlanes, Exception]]:
        loaded: Dict[str, Union[ImagePlanes, Exception]] = {}
        for path in paths:
            try:
                loaded[image_id(path)] = load_image(path)
            except (QTuneError, OSError) as e:
                logger.error(f"Cannot load {path}: {e}")
                loaded[image_id(path)] = e
        return loaded

    def evaluate_encoding(
        self,
        name: str,
        image: ImagePlanes,
        encoded: EncodeResult,
        mode: RecordMode,
        setting: float,
        seed: Optional[int] = None,
        rate_q: Optional[float] = None,
        rate_attention: Optional[float] = None,
    ) -> ExperimentRecord:
        """Decode an encoding with the standard path and score it against the source."""
        decoded = reconstruct(encoded.blocks, encoded.tables, image.width, image.height)
        score = None
        if min(image.width, image.height) >= MS_SSIM_MIN_SIDE:
            score = ms_ssim(image, decoded)
        return ExperimentRecord(
            image_id=name,
            mode=mode,
            setting=setting,
            bpp=compute_bpp(encoded.file, image.width, image.height),
            psnr_db=psnr(image, decoded),
            ms_ssim=score,
            rate_q=rate_q,
            rate_attention=rate_attention,
            file_bytes=encoded.file.size_bytes,
            pixel_count=image.pixel_count,
            seed=seed,
        )

    # -------------------------------------------------------------------------
    # baseline-sweep
    # -------------------------------------------------------------------------

    def cmd_baseline_sweep(
        self,
        input_path: Union[str, Path],
        qualities: Sequence[int],
        out_csv: Union[str, Path],
    ) -> List[ExperimentRecord]:
        """
        Encode every image at every IJG quality and record bpp/PSNR/MS-SSIM.

        Per-quality test-set averages are appended. Unreadable files produce
        failed rows and the sweep continues.
        """
        if not qualities:
            raise ValueError("at least one quality factor is required")
        for q in qualities:
            if int(q) != q or not 1 <= q <= 100:
                raise ValueError(f"quality must be an integer in [1, 100], got {q}")

        paths = list_images(input_path)
        logger.info(f"Baseline sweep: {len(paths)} images x {len(qualities)} qualities")
        images = self._load_all(paths)

        def job(name: str, quality: int) -> ExperimentRecord:
            image = images[name]
            if isinstance(image, Exception):
                return _failed_record(name, RecordMode.BASELINE, quality, None, image)
            try:
                encoded = encode_baseline(image, quality)
                return self.evaluate_encoding(name, image, encoded, RecordMode.BASELINE, quality)
            except (QTuneError, ValueError) as e:
                logger.error(f"Baseline {name} q={quality} failed: {e}")
                return _failed_record(name, RecordMode.BASELINE, quality, None, e)

        records = self._run_jobs(job, [(name, int(q)) for name in images for q in qualities])
        self._tally(records)
        records = sort_records(records) + average_records(records)
        write_records_csv(records, out_csv)
        logger.success(f"Baseline sweep complete: {self.stats}")
        return records

    # -------------------------------------------------------------------------
    # optimize
    # -------------------------------------------------------------------------

    def _emit(
        self,
        name: str,
        image: ImagePlanes,
        result: OptimizedParams,
        out_dir: Path,
    ) -> ExperimentRecord:
        """Final encode with learned θ, written to disk and scored."""
        params = result.params
        attention = None
        if params.attention is not None:
            attention = params.attention_stack(image.blocks_y, image.blocks_x)
        encoded = encode_image(image, params.tables, attention)

        stem = f"{name}_{result.mode.value}_lam{result.lambda_:g}"
        (out_dir / f"{stem}.jpg").write_bytes(encoded.file.data)
        if params.attention is not None:
            np.save(out_dir / f"{stem}_attention.npy", attention_summary(params.attention))
            preview = smoothed_reconstruction(image, params)
            save_rgb_png(preview.cropped(), out_dir / f"{stem}_smoothed.png")

        return self.evaluate_encoding(
            name,
            image,
            encoded,
            result.mode.record_mode,
            result.lambda_,
            seed=result.seed,
            rate_q=result.report.rate_q,
            rate_attention=result.report.rate_attention if params.attention is not None else None,
        )

    def _grad_check(self, image: ImagePlanes, config: TrainConfig) -> None:
        if min(image.width, image.height) < GRAD_CHECK_SIZE:
            logger.warning(f"Gradient check skipped: image smaller than {GRAD_CHECK_SIZE}px")
            return
        patch = ImagePlanes.from_array(image.cropped()[:GRAD_CHECK_SIZE, :GRAD_CHECK_SIZE])
        params = init_params((patch.blocks_y, patch.blocks_x), config)
        report = finite_difference_check(patch, params, config.weights, seed=config.seed)
        if report.max_rel_error > 1e-4:
            logger.warning(f"Gradient check: largest mismatch {report.worst}")

    def cmd_optimize(
        self,
        input_path: Union[str, Path],
        config: TrainConfig,
        out_dir: Union[str, Path],
        lambdas: Optional[Sequence[float]] = None,
        mode: Optional[TrainMode] = None,
        grad_check: bool = False,
    ) -> List[ExperimentRecord]:
        """
        Optimize θ per λ (per image or over the corpus), emit JPEG files and record metrics.

        Divergent or failing jobs produce failed rows; the sweep continues.
        """
        overrides = {}
        if lambdas is not None:
            overrides["lambda_values"] = list(lambdas)
        if mode is not None:
            overrides["mode"] = mode
        config = TrainConfig.model_validate({**config.model_dump(), **overrides})

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = list_images(input_path)
        images = self._load_all(paths)
        record_mode = config.mode.record_mode
        logger.info(
            f"Optimize ({config.mode.value}): {len(paths)} images x "
            f"{len(config.lambda_values)} λ values, {config.steps} steps"
        )

        if grad_check:
            first = next((im for im in images.values() if isinstance(im, ImagePlanes)), None)
            if first is not None:
                self._grad_check(first, config)

        if config.mode is TrainMode.CORPUS_Q:
            records = self._optimize_corpus(images, config, out_dir)
        else:
            def job(name: str, lam: float) -> ExperimentRecord:
                image = images[name]
                if isinstance(image, Exception):
                    return _failed_record(name, record_mode, lam, config.seed, image)
                try:
                    result = train_per_image(image, lam, config)
                    return self._emit(name, image, result, out_dir)
                except (QTuneError, ValueError) as e:
                    logger.error(f"Optimize {name} λ={lam:g} failed: {e}")
                    return _failed_record(name, record_mode, lam, config.seed, e)

            records = self._run_jobs(
                job, [(name, lam) for name in images for lam in config.lambda_values]
            )

        self._tally(records)
        records = sort_records(records) + average_records(records)
        write_records_csv(records, out_dir / "records.csv")
        logger.success(f"Optimization sweep complete: {self.stats}")
        return records

    def _optimize_corpus(
        self,
        images: Dict[str, Union[ImagePlanes, Exception]],
        config: TrainConfig,
        out_dir: Path,
    ) -> List[ExperimentRecord]:
        dataset = [im for im in images.values() if isinstance(im, ImagePlanes)]
        record_mode = config.mode.record_mode

        def job(lam: float) -> List[ExperimentRecord]:
            try:
                result = train_qtables_corpus(dataset, lam, config, max_workers=self.threads)
            except (QTuneError, ValueError) as e:
                logger.error(f"Corpus training λ={lam:g} failed: {e}")
                return [
                    _failed_record(name, record_mode, lam, config.seed, e) for name in images
                ]
            out = []
            for name, image in images.items():
                if isinstance(image, Exception):
                    out.append(_failed_record(name, record_mode, lam, config.seed, image))
                    continue
                try:
                    out.append(self._emit(name, image, result, out_dir))
                except (QTuneError, ValueError) as e:
                    logger.error(f"Encoding {name} with corpus tables failed: {e}")
                    out.append(_failed_record(name, record_mode, lam, config.seed, e))
            return out

        per_lambda = self._run_jobs(job, [(lam,) for lam in config.lambda_values])
        return [record for batch in per_lambda for record in batch]

    # -------------------------------------------------------------------------
    # rate-proxy-report
    # -------------------------------------------------------------------------

    def cmd_rate_proxy_report(
        self,
        records: Sequence[ExperimentRecord],
        out_csv: Union[str, Path],
    ) -> RateProxyReport:
        """
        Pair rate-loss components with true bpp and rank-correlate them.

        Correlations are computed per image and over all points ("__all__");
        fewer than 3 points leave a correlation undefined (None).
        """
        rows = [
            RateProxyRow(
                image_id=r.image_id,
                mode=r.mode,
                setting=r.setting,
                rate_q=r.rate_q,
                rate_attention=r.rate_attention or 0.0,
                combined=r.rate_q + (r.rate_attention or 0.0),
                true_bpp=r.bpp,
            )
            for r in sort_records(records)
            if r.error is None and r.rate_q is not None and r.image_id != ExperimentRecord.MEAN_ID
        ]

        by_image: Dict[str, List[RateProxyRow]] = defaultdict(list)
        for row in rows:
            by_image[row.image_id].append(row)
        by_image["__all__"] = rows

        correlations: Dict[str, Dict[str, Optional[float]]] = {}
        for name in sorted(by_image):
            members = by_image[name]
            bpp = [m.true_bpp for m in members]
            correlations[name] = {
                component: spearman([getattr(m, component) for m in members], bpp)
                for component in PROXY_COMPONENTS
            }

        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(RateProxyRow.model_fields), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({
                    "image_id": row.image_id,
                    "mode": row.mode.value,
                    "setting": f"{row.setting:g}",
                    "rate_q": f"{row.rate_q:.6f}",
                    "rate_attention": f"{row.rate_attention:.6f}",
                    "combined": f"{row.combined:.6f}",
                    "true_bpp": f"{row.true_bpp:.6f}",
                })

        spearman_csv = out_csv.with_name(f"{out_csv.stem}_spearman.csv")
        with open(spearman_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(
                f, fieldnames=["image_id", "points", *PROXY_COMPONENTS], lineterminator="\n"
            )
            writer.writeheader()
            for name, values in correlations.items():
                writer.writerow({
                    "image_id": name,
                    "points": str(len(by_image[name])),
                    **{k: "undefined" if v is None else f"{v:.6f}" for k, v in values.items()},
                })

        combined = correlations["__all__"]["combined"]
        logger.success(f"Rate proxy report: {len(rows)} points, combined Spearman={combined}")
        return RateProxyReport(rows=rows, correlations=correlations)

    # -------------------------------------------------------------------------
    # evaluate
    # -------------------------------------------------------------------------

    def cmd_evaluate(
        self,
        pairs: Sequence[Tuple[Union[str, Path], Union[str, Path]]],
        out_csv: Union[str, Path],
    ) -> List[ExperimentRecord]:
        """Score existing baseline JFIF files against their source images."""
        if not pairs:
            raise ValueError("nothing to evaluate")

        def job(source: Path, jpeg: Path) -> ExperimentRecord:
            name = Path(jpeg).stem
            try:
                image = load_image(source)
                data = Path(jpeg).read_bytes()
                decoded = decode_jfif(data)
                if (decoded.width, decoded.height) != (image.width, image.height):
                    raise ValueError(
                        f"size {decoded.width}x{decoded.height} differs from source "
                        f"{image.width}x{image.height}"
                    )
                file = JfifFile(
                    data=data,
                    luma_table=decoded.tables.luma.astype(np.int64),
                    chroma_table=decoded.tables.chroma.astype(np.int64),
                    width=decoded.width,
                    height=decoded.height,
                )
                encoded = EncodeResult(file=file, blocks=decoded.blocks, tables=decoded.tables)
                return self.evaluate_encoding(name, image, encoded, RecordMode.EVALUATED, 0.0)
            except (QTuneError, ValueError, OSError) as e:
                logger.error(f"Evaluating {jpeg} failed: {e}")
                return _failed_record(name, RecordMode.EVALUATED, 0.0, None, e)

        records = self._run_jobs(job, [(Path(s), Path(j)) for s, j in pairs])
        self._tally(records)
        write_records_csv(records, out_csv)
        logger.success(f"Evaluation complete: {self.stats}")
        return records


def match_pairs(source_dir: Union[str, Path], jpeg_dir: Union[str, Path]) -> List[Tuple[Path, Path]]:
    """Pair each .jpg with the source image whose id prefixes its name (longest match wins)."""
    sources = {image_id(p): p for p in list_images(source_dir)}
    jpeg_dir = Path(jpeg_dir)
    jpegs = [jpeg_dir] if jpeg_dir.is_file() else sorted(jpeg_dir.glob("*.jpg"))
    pairs = []
    for jpeg in jpegs:
        candidates = [
            name for name in sources if jpeg.stem == name or jpeg.stem.startswith(f"{name}_")
        ]
        if not candidates:
            logger.warning(f"No source image for {jpeg.name}")
            continue
        pairs.append((sources[max(candidates, key=len)], jpeg))
    return pairs
