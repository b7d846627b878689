"""Desk-scale speech-language model: frozen audio encoder, learnable layer
fusion, convolutional downsampler, LoRA-adapted text LM, curriculum training,
masked-prediction encoder pretraining and constrained/joint decoding."""

from .config import RunConfig, load_config
from .decoding import build_trie, constrained_decode, greedy_decode, joint_decode
from .model import CurriculumStage, ModelConfig, SpeechLM
from .tasks import TaskSample, build_vocab
from .trainer import TrainConfig, Trainer

__all__ = ["RunConfig", "load_config", "build_trie", "constrained_decode", "greedy_decode", "joint_decode",
           "CurriculumStage", "ModelConfig", "SpeechLM", "TaskSample", "build_vocab", "TrainConfig", "Trainer"]
