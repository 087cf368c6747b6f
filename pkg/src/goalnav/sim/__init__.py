"""Grid-world simulator: worlds, rendering, planning, motion and tasks."""

from .motion import expert_poses, gen_expert_dataset, gen_expert_episode, random_start, step
from .planning import PathResult, distance_field, shortest_path, shortest_path_cells
from .render import RenderError, render
from .tasks import LEVELS, EvalTask, TaskSamplingError, load_tasks, sample_tasks, save_tasks
from .world import World, WorldGenerationError, generate_world

__all__ = [
    "LEVELS",
    "EvalTask",
    "PathResult",
    "RenderError",
    "TaskSamplingError",
    "World",
    "WorldGenerationError",
    "distance_field",
    "expert_poses",
    "gen_expert_dataset",
    "gen_expert_episode",
    "generate_world",
    "load_tasks",
    "random_start",
    "render",
    "sample_tasks",
    "save_tasks",
    "shortest_path",
    "shortest_path_cells",
    "step",
]
