"""sampling: fixed-step ODE kernels, samplers, trajectories and straightness.

A field is any callable `field(x, t) -> velocity` over (..., N, 3) coordinates.
Networks and oracle fields take the graph first and are bound with
`bind_field(net, graph)`.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Callable, Optional, Union

import torch
from torch import Tensor

from .config import DTYPE
from .errors import DomainError, NumericalError

log = logging.getLogger(__name__)

Field = Callable[[Tensor, float], Tensor]

CHORD_TOL = 1e-12


def bind_field(net: Callable, graph) -> Field:
    """turn a (graph, x, t) callable into a (x, t) field"""

    def field(x: Tensor, t: float) -> Tensor:
        return net(graph, x, t)

    return field


def _check_step(velocity: Tensor, step: int):
    if not bool(torch.isfinite(velocity).all()):
        raise NumericalError(f"non-finite velocity during integration at step {step}")


def _time_grid(steps: int, t_end: float) -> list[float]:
    h = t_end / steps
    return [k * h for k in range(steps)] + [t_end]


def euler_integrate(field: Field, x0: Tensor, steps: int, t_end: float = 1.0) -> tuple[list[float], list[Tensor]]:
    """uniform-step forward Euler from 0 to t_end; returns every visited state"""
    if steps < 1:
        raise DomainError("steps must be at least 1")
    times = _time_grid(steps, t_end)
    assert len(times) == steps + 1
    h = t_end / steps
    states = [x0]
    x = x0
    for k in range(steps):
        v = field(x, times[k])
        _check_step(v, k)
        x = x + h * v
        states.append(x)
    return times, states


def midpoint_integrate(field: Field, x0: Tensor, steps: int, t_end: float = 1.0) -> tuple[list[float], list[Tensor]]:
    """uniform-step explicit midpoint rule from 0 to t_end"""
    if steps < 1:
        raise DomainError("steps must be at least 1")
    times = _time_grid(steps, t_end)
    h = t_end / steps
    states = [x0]
    x = x0
    for k in range(steps):
        v = field(x, times[k])
        _check_step(v, k)
        v_mid = field(x + 0.5 * h * v, times[k] + 0.5 * h)
        _check_step(v_mid, k)
        x = x + h * v_mid
        states.append(x)
    return times, states


KERNELS = {
    "euler": euler_integrate,
    "midpoint": midpoint_integrate,
}


class Trajectory:
    """states of one integration, (steps + 1, ..., N, 3), at times from 0 to 1"""

    def __init__(self, times, states):
        self.times = torch.as_tensor(times, dtype=DTYPE)
        self.states = states if isinstance(states, Tensor) else torch.stack(list(states))
        if self.times.ndim != 1 or self.times.shape[0] != self.states.shape[0]:
            raise DomainError("one state per time is required")
        if self.times.shape[0] < 2:
            raise DomainError("a trajectory has at least two states")
        if not bool((self.times[1:] > self.times[:-1]).all()):
            raise DomainError("times must be strictly increasing")
        if self.times[0] != 0 or self.times[-1] != 1:
            raise DomainError("times must run from 0 to 1")

    def __repr__(self):
        return f"<{self.__class__.__name__} steps={self.steps} shape={tuple(self.states.shape[1:])}>"

    def __len__(self):
        return int(self.times.shape[0])

    @property
    def steps(self) -> int:
        return len(self) - 1

    @property
    def start(self) -> Tensor:
        return self.states[0]

    @property
    def endpoint(self) -> Tensor:
        return self.states[-1]

    def to_dict(self) -> dict[str, Any]:
        return {"times": self.times.tolist(), "states": self.states.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Trajectory":
        return cls(data["times"], torch.as_tensor(data["states"], dtype=DTYPE))

    def to_json(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    def to_csv(self, path: Union[str, Path]):
        """one row per (step, sample, atom): step,t,sample,atom,x,y,z"""
        states = self.states.reshape(len(self), -1, self.states.shape[-2], 3)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "t", "sample", "atom", "x", "y", "z"])
            for step, t in enumerate(self.times.tolist()):
                for sample, coords in enumerate(states[step].tolist()):
                    for atom, (x, y, z) in enumerate(coords):
                        writer.writerow([step, repr(t), sample, atom, repr(x), repr(y), repr(z)])


def _sample(kernel: str, net: Callable, graph, x0, steps: int) -> Trajectory:
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    with torch.no_grad():
        times, states = KERNELS[kernel](bind_field(net, graph), x0, steps)
    return Trajectory(times, states)


def euler_sample(net: Callable, graph, x0, steps: int) -> Trajectory:
    """integrate net(graph, x, t) from x0 at t=0 to t=1 with forward Euler"""
    return _sample("euler", net, graph, x0, steps)


def midpoint_sample(net: Callable, graph, x0, steps: int) -> Trajectory:
    """integrate net(graph, x, t) from x0 at t=0 to t=1 with the midpoint rule"""
    return _sample("midpoint", net, graph, x0, steps)


def straightness(traj: Trajectory, flag: Optional[list] = None) -> float:
    """mean normalized deviation of the interior states from the endpoint chord.

    Per interior time the per-atom distance to (1-t) x_0 + t x_1 is averaged
    over atoms and divided by the RMS per-atom chord length. Batched
    trajectories return the mean over samples. A zero-length chord yields the
    absolute deviation and appends the sample index to `flag` when given.
    """
    if len(traj) < 3:
        raise DomainError("straightness needs at least 3 states")
    states = traj.states.reshape(len(traj), -1, traj.states.shape[-2], 3)
    t = traj.times[1:-1, None, None, None]
    chord = (1 - t) * states[0] + t * states[-1]
    deviation = torch.linalg.norm(states[1:-1] - chord, dim=-1).mean(dim=(0, 2))
    length = torch.sqrt(((states[-1] - states[0]) ** 2).sum(-1).mean(-1))
    degenerate = length < CHORD_TOL
    if bool(degenerate.any()):
        log.warning("degenerate chord in %d sample(s): absolute deviation", int(degenerate.sum()))
        if flag is not None:
            flag.extend(torch.nonzero(degenerate).flatten().tolist())
    res = torch.where(degenerate, deviation, deviation / torch.where(degenerate, torch.ones_like(length), length))
    return float(res.mean())
