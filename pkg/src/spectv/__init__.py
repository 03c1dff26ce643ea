"""Spectral total-variation decomposition and band-ensemble classification."""

from .data import (DEFAULT_MASK, Label3, Manifest, PatchRecord, load_manifest,
                   masked_pixels, remap_lu, save_manifest, training_rows)
from .ensemble import (BandConfig, DecisionTree, EnsembleModel, Forest,
                       band_split, classify_patient, fit_band_ensemble, fit_tree,
                       predict_pixel, predict_tags, score_patch, score_vertebra)
from .errors import ContractViolation, FormatError, ManifestError
from .evaluation import (CvResult, FeatureTable, FoldPlan, MetricsReport, RocCurve,
                         ablation_scales, band_importance, component_sweep,
                         extract_features, kfold_by_patient, mean_spectrum_by_class,
                         metrics_at_cutoff, patch_features, roc_auc, run_cv)
from .flow import (DualState, FlowConfig, ProxResult, ScaleSpace, as_image,
                   rof_prox, tv_energy, tv_flow)
from .phantoms import (SyntheticCohort, disk_image, noise_texture, random_phantom,
                       save_cohort, step_signal_1d, synth_cohort, texture_patch,
                       two_disks_image)
from .transform import (SignatureField, SpectralStack, Spectrum, TransferFunction,
                        decompose, enhance_signatures, enhance_vectors,
                        extract_signatures, reconstruct, spectrum, stv_filter,
                        stv_transform)

__version__ = "0.1.0"
