from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

LEARNING_CURVE_COLUMNS = [
    "iteration", "gen_loss", "critic_loss", "actor_obj", "l_avg",
    "lr_gen", "noise_scale", "test_mse_mean", "test_mse_std"
]
LR_SWEEP_COLUMNS = ["iteration", "lr_gen", "gen_loss"]

EVAL_MODES = ["adaptive", "spiral", "waypoints"]
SUPERVISED_MODES = ["off", "always", "decayed"]
LOSS_VARIANTS = ["mse", "mse+sobel", "region_max"]
GEN_OPTIMIZERS = ["adam", "sgd"]


@dataclass
class RunningStats:
    """Exponential moving averages of the generator loss and its square (kept in float32)"""
    l_avg: float = 0.0
    l_sq_avg: float = 0.0
    initialized: bool = False

    @property
    def variance(self) -> float:
        return max(self.l_sq_avg - self.l_avg * self.l_avg, 0.0)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass
class NoiseState:
    eps_prev: float = 0.0
    iteration: int = 0


@dataclass
class IterationRecord:
    iteration: int
    gen_loss: Optional[float] = None
    critic_loss: Optional[float] = None
    actor_obj: Optional[float] = None
    l_avg: Optional[float] = None
    lr_gen: Optional[float] = None
    noise_scale: Optional[float] = None
    test_mse_mean: Optional[float] = None
    test_mse_std: Optional[float] = None

    def to_row(self, columns: Sequence[str] = tuple(LEARNING_CURVE_COLUMNS)) -> List[str]:
        row = []
        for column in columns:
            value = getattr(self, column)
            if value is None:
                row.append("")
            elif column == "iteration":
                row.append(str(value))
            else:
                row.append(repr(float(value)))
        return row

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "IterationRecord":
        values = {k: (float(v) if v != "" else None) for k, v in row.items() if k != "iteration"}
        return cls(iteration=int(row["iteration"]), **values)


@dataclass
class EvalReport:
    mode: str
    mean: float
    std: float
    count: int
    per_image: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_csv(self) -> str:
        return f"mean,std,count\n{self.mean!r},{self.std!r},{self.count}\n"
