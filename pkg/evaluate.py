#!/usr/bin/env python3
"""
Sampling sweep: how well do density-weighted (WDS) and uniform subsets
recover the interaction ranking of the full dataset?

For every sketch size R and sample fraction, several subsets are drawn per
sampler, interactions are discovered on each subset and scored against the
ground truth; mean NES and its MSE against the full-dataset NES are reported.
"""

from typing import Dict, List, Optional, Sequence
import logging
import time

import numpy as np
import pandas as pd

from attention_toy import AttentionEncoder, forward_batch
from density_sketch import estimate_all
from diversity_sampler import imd, sample_fraction, uniform_plan, variance_factor
from enrichment_eval import nes
from errors import CellSketchError
from interaction_aggregator import aggregate, subset_weights
from models import AttentionMap, Dataset, GroundTruthSet, HashFamilyConfig, RunConfig, SampledSubset
from seeding import derive_seed

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["sampler", "rows", "fraction", "subset_size", "runs", "mean_nes", "mse", "mean_variance_factor"]


def diverse_coverage(subset: SampledSubset, clusters: Dict[str, int]) -> int:
    """Number of distinct diverse clusters with at least one sampled cell."""
    return len({clusters[cell_id] for cell_id in subset.cell_ids if cell_id in clusters})


class SamplingSweepEvaluator:
    """WDS vs uniform sampling, swept over sketch rows and sample fractions."""

    def __init__(self, dataset: Dataset, truth: GroundTruthSet, model: AttentionEncoder, config: RunConfig):
        self.dataset = dataset
        self.truth = truth
        self.model = model
        self.config = config
        self.maps: Optional[List[AttentionMap]] = None
        self.reference_nes: Optional[float] = None

    def run(self, fractions: Sequence[float], rows: Sequence[int], repeats: int = 5) -> pd.DataFrame:
        """Run the whole sweep and return one report row per (sampler, R, fraction)."""
        logger.info("🚀 Starting sampling sweep...")
        start = time.time()

        self._compute_maps()
        self.reference_nes = self._nes_of(self.dataset, self.maps, None, "full")
        logger.info(f"📊 Full-dataset NES: {self.reference_nes:.4f}")

        records = []
        for fraction in fractions:
            plan = uniform_plan(self.dataset)
            records.append(self._evaluate_sampler("uniform", None, fraction, plan, repeats))
        for n_rows in rows:
            plan = self._wds_plan(n_rows)
            for fraction in fractions:
                records.append(self._evaluate_sampler("wds", n_rows, fraction, plan, repeats))

        report = pd.DataFrame.from_records(records, columns=REPORT_COLUMNS)
        logger.info(f"✅ Sweep finished in {time.time() - start:.1f}s")
        return report

    def _compute_maps(self):
        logger.info(f"🧠 Computing attention maps for {self.dataset.n_cells} cells...")
        self.maps = forward_batch(list(self.dataset.cells()), self.model, self.config.batch_size)

    def _wds_plan(self, n_rows: int):
        hash_config = HashFamilyConfig(
            seed=derive_seed(self.config.seed, "cws", n_rows), n_rows=n_rows, n_buckets=self.config.n_buckets
        )
        logger.info(f"📏 Estimating densities with R={n_rows}, B={self.config.n_buckets}")
        return imd(estimate_all(self.dataset, hash_config))

    def _nes_of(self, dataset: Dataset, maps: List[AttentionMap], weights, label: str) -> float:
        try:
            ranked = aggregate(dataset, maps, self.config.mode, weights)
            result = nes(ranked, self.truth, self.config.n_perm, derive_seed(self.config.seed, "nes", label), self.config.threads)
        except CellSketchError as e:
            logger.warning(f"⚠️  No NES for {label}: {e}")
            return float("nan")
        return result.nes

    def _evaluate_sampler(self, sampler: str, n_rows: Optional[int], fraction: float, plan, repeats: int) -> Dict:
        values, factors, size = [], [], 0
        for repeat in range(repeats):
            draw_plan = plan.model_copy(update={"seed": derive_seed(self.config.seed, "sample", sampler, n_rows, fraction, repeat)})
            subset = sample_fraction(draw_plan, fraction)
            size = len(subset.members)
            positions = [self.dataset.position(cell_id) for cell_id in subset.cell_ids]
            sub_dataset = self.dataset.subset(subset.cell_ids)
            weights = subset_weights(sub_dataset, subset) if self.config.weighted_estimator else None
            label = f"{sampler} R={n_rows} f={fraction} #{repeat}"
            values.append(self._nes_of(sub_dataset, [self.maps[pos] for pos in positions], weights, label))
            factors.append(variance_factor(subset))

        values = np.array(values)
        finite = values[np.isfinite(values)]
        mean_nes = float(finite.mean()) if finite.size else float("nan")
        mse = float(np.mean((finite - self.reference_nes) ** 2)) if finite.size else float("nan")
        logger.info(f"🎯 {sampler:7s} R={n_rows} fraction={fraction:g}: mean NES {mean_nes:.4f}, MSE {mse:.4f}")
        return {
            "sampler": sampler,
            "rows": n_rows if n_rows is not None else "-",
            "fraction": fraction,
            "subset_size": size,
            "runs": int(finite.size),
            "mean_nes": mean_nes,
            "mse": mse,
            "mean_variance_factor": float(np.mean(factors)),
        }

    def save_report(self, report: pd.DataFrame, path: str):
        report.to_csv(path, sep="\t", index=False, float_format="%.6g")
        logger.info(f"💾 Sweep report saved to {path}")
