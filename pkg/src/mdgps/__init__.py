"""Mirror descent guided policy search on small simulated control tasks."""
from .envs import make_env
from .mdgps import MDGPSConfig, MDGPSState, run, run_iteration
from .policy import GlobalPolicy, load_checkpoint, save_checkpoint
from .trajdist import TimeVaryingLinGauss, traj_kl

__all__ = ["make_env", "MDGPSConfig", "MDGPSState", "run", "run_iteration", "GlobalPolicy",
           "load_checkpoint", "save_checkpoint", "TimeVaryingLinGauss", "traj_kl"]
__version__ = "0.1.0"
