"""Audio-text alignment through a shared image pivot.

Two contrastive stages share one image tower: image-text training gives
the pivot a caption-shaped neighborhood, image-audio training pulls
audio into the same space, and audio-text alignment emerges without a
single paired audio-text example.  A third, optional stage fine-tunes
the audio tower on curated audio-text pairs against a frozen text
tower.

The package is numpy end to end: a small reverse-mode autodiff core
(`autodiff`), transformer towers with cross-modal weight surgery
(`encoders`), log mel spectrogram frontend (`fbank`), symmetric
contrastive objectives (`objectives`), a deterministic synthetic
tri-modal corpus (`world`), staged training (`training`), retrieval and
zero-shot evaluation (`evaluation`), pair curation (`curation`), and a
reproducible command-line pipeline (`cli`).
"""

from .autodiff import (Tensor, bce_with_logits, broadcast_to, concat, gelu,
                       l2_normalize, layer_norm, log_softmax, softmax,
                       take_pairs, take_rows)
from .curation import (AlignmentPair, CaptionPool, build_pool, dedupe_pairs,
                       fewshot_subset, gold_pairs, load_pairs, mine_pairs,
                       random_pairs, save_pairs)
from .encoders import (Embedding, EncoderConfig, ModalEncoder, PatchConfig,
                       adapt_kernel_channels, extract_patches,
                       init_audio_from_image, init_encoder,
                       interpolate_positions, patch_grid, with_positions_for)
from .errors import ContractViolation, FrozenPivotError, QuarantineError
from .evaluation import (EvalReport, MapResult, PivotabilityScore,
                         RetrievalResult, ScalingFit, encode_audio,
                         encode_captions, encode_images,
                         encode_label_prompts, fit_scaling,
                         mean_average_precision, pivotability,
                         pivotability_probe, recall_at_k, va_retrieval_check,
                         zero_shot_accuracy, zero_shot_classify)
from .fbank import (CorpusStats, FbankSpectrogram, WaveformClip,
                    compute_fbank, corpus_stats, mask_augment, mel_filterbank,
                    normalize, num_frames)
from .objectives import (Temperature, info_nce, loss_at, loss_bibi,
                         loss_tri, loss_va_frozen, similarity_matrix,
                         softmax_cross_entropy)
from .seeding import substream
from .training import (Adam, ClassifierProbe, MomentumSgd, StageConfig,
                       StageData, attach_classifier_head,
                       compute_corpus_stats, load_checkpoint, run_stage,
                       sample_frame, save_checkpoint, spec_bank)
from .world import (CLASS_WORDS, ClipFrameSet, CorpusSplit, GoldQuarantine,
                    TriModalRecord, Vocab, WorldConfig, audio_template,
                    centroid_oracle, default_vocab, generate_world,
                    load_world, make_caption, save_world, visual_template)

__version__ = "0.1.0"
