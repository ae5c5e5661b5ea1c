from .dataset import Dataset, Sample, load_dataset, save_dataset
from .anomalies import ConfettiConfig, confetti, inject_confetti, oe_mix, sample_rng
from .scenarios import ScenarioConfig, synth_scenario, glyph_region
from .augment import AugmentPolicy, IDENTITY, augment, augment_pair, channel_stats, normalize

__all__ = [
    "Dataset",
    "Sample",
    "load_dataset",
    "save_dataset",
    "ConfettiConfig",
    "confetti",
    "inject_confetti",
    "oe_mix",
    "sample_rng",
    "ScenarioConfig",
    "synth_scenario",
    "glyph_region",
    "AugmentPolicy",
    "IDENTITY",
    "augment",
    "augment_pair",
    "channel_stats",
    "normalize",
]
