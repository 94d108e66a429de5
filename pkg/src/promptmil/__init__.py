"""Few-shot whole-slide-image classification head on precomputed patch and
text embeddings: language-guided instance selection, entity-guided
cross-attention, cross-scale entity graph attention, gated slide pooling,
and fused entity/slide prompt alignment, with a training harness and an
LLM-driven prompt-pack builder."""

from .config import ExperimentConfig, RunConfig
from .dataio import (DatasetManifest, FeatureBag, FewShotSplit, SyntheticSpec,
                     build_cv_repeats, generate_synthetic, load_feature_bag,
                     load_manifest, read_matrix, sample_few_shot, write_matrix)
from .metrics import MetricEntry, MetricReport, aggregate_repeats, compute_metrics
from .model import ModelParams, SlideOutput, forward_slide, fuse_logits, init_params, predict
from .prompts import (FixtureBackend, HttpBackend, PromptPack, ScriptedBackend,
                      build_prompt_pack, load_pack, save_pack)
from .selection import SelectionResult, score_instances, select_instances, select_top
from .textenc import FrozenTextEncoder, PromptEmbeddings, encode_pack, load_embedding_bundle
from .train import AdamW, TrainResult, init_and_train, train

__version__ = "0.1.0"
