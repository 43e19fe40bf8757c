from models.scan import (
    ImageDataset, ProcessedImage, EpisodeState, ScanHistory, PartialScan, SplitDataset,
    DIHEDRAL_TRANSFORMS
)
from models.training import (
    RunningStats, NoiseState, IterationRecord, EvalReport,
    LEARNING_CURVE_COLUMNS, EVAL_MODES, SUPERVISED_MODES, LOSS_VARIANTS
)

__all__ = [
    'ImageDataset', 'ProcessedImage', 'EpisodeState', 'ScanHistory', 'PartialScan', 'SplitDataset',
    'DIHEDRAL_TRANSFORMS',
    'RunningStats', 'NoiseState', 'IterationRecord', 'EvalReport',
    'LEARNING_CURVE_COLUMNS', 'EVAL_MODES', 'SUPERVISED_MODES', 'LOSS_VARIANTS'
]
