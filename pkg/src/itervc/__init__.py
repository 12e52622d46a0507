"""Alternating ASR / voice-conversion training on a synthetic speech corpus."""

from .asr import AsrModel, AsrTrainConfig, encode, finetune_asr, greedy_decode, train_asr
from .augment import AugmentationPolicy, augment_dataset
from .data import DatasetManifest, SyntheticCorpusSpec, generate_synthetic_corpus, load_manifest
from .features import FeatureConfig, MelSpectrogram, melspectrogram
from .metrics import evaluate_conversion, word_error_rate
from .orchestrator import has_converged, run_iterations
from .speaker import SpeakerEncoder, embed, identity_similarity, train_speaker_encoder
from .vc import VcModel, VcTrainConfig, convert, speech_consistency_loss, train_vc

__version__ = "0.1.0"
