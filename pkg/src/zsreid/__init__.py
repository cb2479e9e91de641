"""Zero-shot object re-identification evaluation over pre-extracted features."""

from zsreid.corpus import CropRecord, SplitAssignment, filter_crops, pad_bbox, parse_mot, stratified_split
from zsreid.embeddings import EmbeddingMatrix, FusedDescriptorMatrix, fuse, l2_normalize_rows, load_embeddings
from zsreid.masks import MaskRecord, decode_rle, mask_iou, rasterize_to_grid
from zsreid.metrics import EvalReport, average_precision, cmc_at_k, mean_ap
from zsreid.pipeline import PipelineConfig, ablate, emit_report, fuse_table, run_evaluation
from zsreid.rerank import RerankParams, k_reciprocal_rerank
from zsreid.similarity import SimilarityMatrix, aqe_expand, combined_similarity, cosine_matrix

__version__ = "0.1.0"

__all__ = [
    "CropRecord", "SplitAssignment", "filter_crops", "pad_bbox", "parse_mot", "stratified_split",
    "EmbeddingMatrix", "FusedDescriptorMatrix", "fuse", "l2_normalize_rows", "load_embeddings",
    "MaskRecord", "decode_rle", "mask_iou", "rasterize_to_grid",
    "EvalReport", "average_precision", "cmc_at_k", "mean_ap",
    "PipelineConfig", "ablate", "emit_report", "fuse_table", "run_evaluation",
    "RerankParams", "k_reciprocal_rerank",
    "SimilarityMatrix", "aqe_expand", "combined_similarity", "cosine_matrix",
]
