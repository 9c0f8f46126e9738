"""Rank-adversarial domain adaptation for transformer phenology regression."""

from .tensor import (Tensor, Graph, Adam, AdamState, ShapeError, GraphError,
                     NonFiniteGradError, backward, grad_reverse, cosine_similarity)
from .model import (ModelConfig, PhenoFormer, HybridLayerNorm, LayerNorm,
                    Standardizer, UninitializedStatsError, param_count)
from .losses import (RankLossConfig, MaskedLossError, mse, rank_n_contrast,
                     binary_domain_loss, coral)
from .synthdata import (Site, SpeciesParams, ClimateConfig, SampleRecord, Dataset,
                        default_species, generate_climate, generate_dataset, gdd_date,
                        split_chronological, split_by_annual_temp, split_by_elevation,
                        split_random, apply_split, csv_read, csv_write, to_arrays)
from .trainer import (METHODS, TrainConfig, RunResult, fit, fit_thermal_time,
                      predict_for_method, predict_thermal_time, lambda_schedule)
from .evalreport import (MetricRow, MetricError, metrics, species_rows, aggregate,
                         cells_read, cells_write, emit_scatter, report_text)

__version__ = "0.1.0"
