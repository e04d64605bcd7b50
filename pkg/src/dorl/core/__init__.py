"""Dense-tensor autograd, optimizer, schedule, RNG and checkpoint plumbing."""
from .autograd import Tensor, count_ops, forward_backward, no_grad
from .checkpoint import load_params, read_container, save_params, write_container
from .gradcheck import REGISTERED_OPS, grad_check
from .optim import OptimState, ScheduleConfig, adamw_step, lr_at
from .params import ParamStore
from .rng import derive_seed, stream

__all__ = [
    "Tensor", "count_ops", "forward_backward", "no_grad",
    "load_params", "read_container", "save_params", "write_container",
    "REGISTERED_OPS", "grad_check",
    "OptimState", "ScheduleConfig", "adamw_step", "lr_at",
    "ParamStore", "derive_seed", "stream",
]
