"""One-shot cross-domain watermark recognition.

A query photograph is identified among thousands of fine-grained reference
classes by densely matching mid-level local features under a spatial
consistency score, with triplet-based feature adaptation, synthetic
reference generation and a two-stage large-scale retrieval pipeline.
"""

from .extract import (CanonicalImage, Extractor, FeaturePyramid,
                      HandcraftedExtractor, ScaleSet, extract_baseline_map,
                      extract_pyramid, extract_query_map,
                      handcrafted_test_extract, load_image, orient_image,
                      preprocess, save_image)
from .featmap import (FeatureMap, FormatError, GridPosition, cell_center,
                      cosine, decode_orientation, encode_orientation,
                      normalize_features, read_fmap, write_fmap)
from .match import (MatchRecord, ScoreBreakdown, avgpool_sim, best_match,
                    concat_sim, heatmap_query, heatmap_reference, localsim,
                    score_oriented, score_pair)
from .mine import (AdapterParams, MiningConfig, MiningError, TripletBatch,
                   adam_step, adapter_triplet_loss, apply_adapter,
                   apply_adapter_pyramid, mine_hard_negative, mine_manifest,
                   mine_positives, read_adapter, read_triplets, train_adapter,
                   triplet_loss, write_adapter, write_triplets)
from .onnxlite import NeuralExtractor, load_model, run
from .retrieval import (DEFAULT_SIGMA_CELLS, EvalReport, FingerprintMismatch,
                        IndexConfig, ManifestRecord, RankedResult,
                        ReferenceIndex, build_index, evaluate, load_index,
                        read_manifest, rerank, save_index, stage1_rank)
from .synth import (BinaryPattern, SynthConfig, gen_benchmark,
                    plain_synthetic, randomized_synthetic)

__version__ = "0.1.0"
