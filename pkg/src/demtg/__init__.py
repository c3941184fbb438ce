"""Multi-task dense prediction with deformable mixers and a task-aware gating decoder."""
from .autodiff import ConfigError, ContractError, DimensionError, ParamStore, Tape, Tensor
from .config import RunConfig
from .data import Sample, TaskInfo, read_dataset, synth_dataset, synth_scene, write_dataset
from .metrics import MetricReport, delta_m, miou
from .model import DeMTG, ModelConfig
from .tasks import TaskSpec, default_task, nyud_tasks

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "ParamStore", "Tape", "Tensor",
    "RunConfig", "Sample", "TaskInfo", "read_dataset", "synth_dataset", "synth_scene",
    "write_dataset", "MetricReport", "delta_m", "miou", "DeMTG", "ModelConfig", "TaskSpec",
    "default_task", "nyud_tasks",
]
__version__ = "0.1.0"
