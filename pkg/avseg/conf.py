import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix='AVSEG_')

    output_root: Path = Path('runs')
    log_level: str = 'INFO'
    device: str = 'cpu'
    model_cache_size: int = 4


settings = Settings()


class AudioConfig(BaseModel):
    sample_rate: int = 22050
    duration_s: float = 3.0
    window_ms: float = 50.0
    hop_ms: float = 25.0
    n_fft: int = 512
    time_steps: int = 300

    @model_validator(mode='after')
    def check(self):
        if self.sample_rate <= 0:
            raise ValueError('sample_rate must be > 0')
        if self.window_ms <= 0 or self.hop_ms <= 0:
            raise ValueError('window_ms and hop_ms must be > 0')
        if self.n_fft < 2:
            raise ValueError('n_fft must be >= 2')
        if self.time_steps < 1:
            raise ValueError('time_steps must be >= 1')
        if self.hop_length < 1:
            raise ValueError('hop_ms is shorter than one sample')
        return self

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def window_length(self) -> int:
        # A window longer than the transform is truncated to n_fft samples.
        return max(1, min(round(self.window_ms * self.sample_rate / 1000), self.n_fft))

    @property
    def hop_length(self) -> int:
        return round(self.hop_ms * self.sample_rate / 1000)

    @property
    def num_samples(self) -> int:
        return round(self.duration_s * self.sample_rate)


class EncoderConfig(BaseModel):
    backbone: Literal['toy', 'resnet50'] = 'resnet50'
    dim: int = 256
    stages: int = 4
    image_size: tuple[int, int] = (224, 224)
    stem_width: int = 32
    visual_widths: list[int] = [64, 128, 256, 512]
    audio_widths: list[int] = [32, 64, 128]
    per_stage_heads: bool = True

    @model_validator(mode='after')
    def check(self):
        if self.dim < 2:
            raise ValueError('dim must be >= 2')
        if not 1 <= self.stages <= 4:
            raise ValueError('stages must be in 1..4')
        if self.backbone == 'toy' and len(self.visual_widths) < self.stages:
            raise ValueError(f'visual_widths lists {len(self.visual_widths)} widths for {self.stages} stages')
        if not self.audio_widths:
            raise ValueError('audio_widths must not be empty')
        stride = self.strides[-1]
        h, w = self.image_size
        if h % stride or w % stride:
            raise ValueError(f'image size {h}x{w} is not divisible by the deepest stride {stride}')
        if not self.per_stage_heads and len(set(self.visual_widths[:self.stages])) != 1:
            raise ValueError('a shared visual head needs equal stage widths')
        return self

    @property
    def strides(self) -> list[int]:
        return [2 ** (s + 2) for s in range(self.stages)]

    @property
    def stage_shapes(self) -> list[tuple[int, int]]:
        h, w = self.image_size
        return [(h // s, w // s) for s in self.strides]


class FusionConfig(BaseModel):
    bias: bool = False
    zero_init_mu: bool = False


class DecoderConfig(BaseModel):
    fpn_width: int = 128
    zero_init_head: bool = False

    @model_validator(mode='after')
    def check(self):
        if self.fpn_width < 1:
            raise ValueError('fpn_width must be >= 1')
        return self


class LossConfig(BaseModel):
    temperature: float = 0.07
    avf_weight: float = 1.0
    pmr_weight: float = 1.0
    similarity_features: Literal['pre_fusion', 'post_fusion'] = 'pre_fusion'

    @model_validator(mode='after')
    def check(self):
        if self.temperature <= 0:
            raise ValueError('temperature must be > 0')
        return self


class PseudoMaskConfig(BaseModel):
    channels: int = 1
    encoder_stages: Optional[int] = None
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    saliency_provider: Literal['activation', 'detector', 'file'] = 'activation'
    saliency_dir: Optional[Path] = None
    detector_epochs: int = 5
    invert_saliency_label: bool = False
    regenerate_every: int = 0

    @model_validator(mode='after')
    def check(self):
        if self.channels < 1:
            raise ValueError('pseudomask.channels must be >= 1')
        if self.encoder_stages is not None and not 1 <= self.encoder_stages <= 4:
            raise ValueError('pseudomask.encoder_stages must be in 1..4')
        if self.epochs < 1 or self.detector_epochs < 1:
            raise ValueError('pseudomask epochs must be >= 1')
        if self.batch_size < 2:
            raise ValueError('the fg/bg contrastive loss needs batch_size >= 2')
        if self.lr <= 0:
            raise ValueError('pseudomask.lr must be > 0')
        if self.saliency_provider == 'file' and self.saliency_dir is None:
            raise ValueError('the file saliency provider needs saliency_dir')
        if self.regenerate_every < 0:
            raise ValueError('regenerate_every must be >= 0')
        return self


class MetricsConfig(BaseModel):
    beta_sq: float = 0.3
    threshold: float = 0.5
    workers: int = 1

    @model_validator(mode='after')
    def check(self):
        if self.beta_sq <= 0:
            raise ValueError('beta_sq must be > 0')
        if not 0 < self.threshold < 1:
            raise ValueError('threshold must be in (0, 1)')
        if self.workers < 1:
            raise ValueError('workers must be >= 1')
        return self


class OptimizerConfig(BaseModel):
    kind: Literal['adam', 'adamw'] = 'adam'
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0

    @model_validator(mode='after')
    def check(self):
        if self.lr <= 0:
            raise ValueError('lr must be > 0')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError('betas must be in [0, 1)')
        return self


ShapeKind = Literal['circle', 'square', 'triangle', 'diamond', 'cross', 'ring', 'hbar', 'vbar']

DEFAULT_SHAPES = ('circle', 'square', 'triangle', 'diamond', 'cross', 'ring', 'hbar', 'vbar')
DEFAULT_COLORS = (
    (230, 40, 40), (40, 200, 60), (40, 90, 230), (240, 200, 30),
    (200, 40, 220), (30, 210, 210), (250, 130, 20), (120, 60, 200),
)
# fundamentals in transform bins; three harmonics of each stay below Nyquist at n_fft=126
DEFAULT_TONE_BINS = (5, 8, 11, 14, 17, 20, 7, 13)


class ClassSpec(BaseModel):
    name: str
    shape: ShapeKind
    color: tuple[int, int, int]
    fundamental_hz: float
    harmonics: list[float] = [1.0, 0.5, 0.25]


class SynthSpec(BaseModel):
    n_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 64
    sample_rate: int = 8000
    duration_s: float = 1.6
    tone_n_fft: int = 126
    classes: Optional[list[ClassSpec]] = None
    noise_level: float = 0.05
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    distractors: bool = False
    n_mixture_samples: int = 0
    seed: int = 0

    @model_validator(mode='after')
    def check(self):
        if self.n_classes < 1:
            raise ValueError('n_classes must be >= 1')
        if self.classes is None and self.n_classes > len(DEFAULT_SHAPES):
            raise ValueError(f'only {len(DEFAULT_SHAPES)} default classes exist; list classes explicitly')
        if self.classes is not None and len(self.classes) != self.n_classes:
            raise ValueError('classes must list exactly n_classes entries')
        if self.samples_per_class < 1:
            raise ValueError('samples_per_class must be >= 1')
        if abs(sum(self.split) - 1.0) > 1e-6 or min(self.split) < 0:
            raise ValueError('split ratios must be non-negative and sum to 1')
        if self.noise_level < 0:
            raise ValueError('noise_level must be >= 0')
        if self.n_mixture_samples and self.n_classes < 2:
            raise ValueError('mixtures need at least two classes')
        return self

    def class_specs(self) -> list[ClassSpec]:
        if self.classes is not None:
            return self.classes
        bin_hz = self.sample_rate / self.tone_n_fft
        return [
            ClassSpec(
                name=f'c{k}',
                shape=DEFAULT_SHAPES[k],
                color=DEFAULT_COLORS[k],
                fundamental_hz=DEFAULT_TONE_BINS[k] * bin_hz,
            )
            for k in range(self.n_classes)
        ]


Mode = Literal['weak', 'supervised', 'avf_only', 'pmr_only', 'baseline']

CONTRASTIVE_MODES = ('weak', 'supervised', 'avf_only')
MASK_LOSS_MODES = ('weak', 'supervised', 'pmr_only')

FULL_SCALE_DATA = {'image_size': 224, 'sample_rate': 22050, 'duration_s': 3.0, 'tone_n_fft': 512}


class RunConfig(BaseModel):
    mode: Mode = 'weak'
    audio: AudioConfig = Field(default_factory=AudioConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    pseudomask: PseudoMaskConfig = Field(default_factory=PseudoMaskConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    data: SynthSpec = Field(default_factory=lambda: SynthSpec(**FULL_SCALE_DATA))
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    output_dir: Optional[Path] = None
    loader_workers: int = 0
    eval_every_epoch: bool = True

    @model_validator(mode='after')
    def check(self):
        if self.epochs < 1:
            raise ValueError('epochs must be >= 1')
        if self.batch_size < 1:
            raise ValueError('batch_size must be >= 1')
        if self.uses_avf and self.batch_size < 2:
            raise ValueError(f'mode {self.mode} uses the contrastive loss and needs batch_size >= 2')
        if self.pseudomask.encoder_stages is not None and self.encoder.backbone == 'toy' \
                and len(self.encoder.visual_widths) < self.pseudomask.encoder_stages:
            raise ValueError('pseudomask.encoder_stages exceeds the listed visual widths')
        if (self.data.image_size, self.data.image_size) != tuple(self.encoder.image_size):
            raise ValueError(f'data.image_size {self.data.image_size} does not match '
                             f'encoder.image_size {tuple(self.encoder.image_size)}')
        return self

    @property
    def uses_avf(self) -> bool:
        return self.mode in CONTRASTIVE_MODES

    @property
    def uses_mask_loss(self) -> bool:
        return self.mode in MASK_LOSS_MODES

    @property
    def uses_pseudo_masks(self) -> bool:
        return self.mode in ('weak', 'pmr_only')

    def run_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else settings.output_root / f'{self.mode}-s{self.seed}'


PROFILES: dict[str, dict[str, Any]] = {
    'full': {
        'data': dict(FULL_SCALE_DATA),
    },
    'toy': {
        'audio': {'sample_rate': 8000, 'duration_s': 1.6, 'n_fft': 126, 'time_steps': 64},
        'encoder': {
            'backbone': 'toy',
            'dim': 32,
            'image_size': [64, 64],
            'stem_width': 16,
            'visual_widths': [16, 32, 48, 64],
            'audio_widths': [16, 32, 64],
        },
        'decoder': {'fpn_width': 32},
        'data': {'image_size': 64, 'sample_rate': 8000, 'duration_s': 1.6, 'tone_n_fft': 126},
        'pseudomask': {'encoder_stages': 1, 'epochs': 15, 'batch_size': 16, 'lr': 1e-3},
        'optimizer': {'lr': 1e-3},
        'epochs': 20,
        'batch_size': 16,
    },
}


def deep_merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def set_dotted(data: dict, key: str, value: Any):
    *parents, leaf = key.split('.')
    node = data
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f'cannot set {key}: {part} is not a section')
    node[leaf] = value


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition('=')
    if not sep or not key:
        raise ConfigError(f'override {item!r} is not of the form key=value')
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def validate_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_run_config(path: Optional[Path] = None, profile: Optional[str] = 'toy',
                    overrides: Iterable[str] = ()) -> RunConfig:
    if profile is not None and profile not in PROFILES:
        raise ConfigError(f'unknown profile {profile!r}; choose from {sorted(PROFILES)}')
    data = copy.deepcopy(PROFILES[profile]) if profile else {}
    if path is not None:
        try:
            deep_merge(data, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read config file {path}: {e}') from e
    for item in overrides:
        set_dotted(data, *parse_override(item))
    return validate_run_config(data)


def apply_overrides(cfg: RunConfig, updates: dict[str, Any]) -> RunConfig:
    data = cfg.model_dump(mode='json')
    for key, value in updates.items():
        set_dotted(data, key, value)
    return validate_run_config(data)


def config_hash(*parts: BaseModel | dict) -> str:
    payload = json.dumps([p.model_dump(mode='json') if isinstance(p, BaseModel) else p for p in parts],
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def model_config_hash(cfg: RunConfig) -> str:
    shape = {'freq_bins': cfg.audio.freq_bins, 'time_steps': cfg.audio.time_steps}
    return config_hash(shape, cfg.encoder, cfg.fusion, cfg.decoder)
