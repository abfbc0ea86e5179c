"""
Seeded environment generators and their text serialization.

Every generator draws from make_rng(recipe.seed, stream) with a fixed stream
per environment kind, so (recipe, seed) fully determines the instance.
Rewards are sparsified by zeroing entries below the threshold; transition rows
are drawn from (0, 1] and normalized, which keeps them strictly positive.

File format (one environment per file):

    line 1     JSON header: {"format": "pbrl-env", "version": 1, "kind": ..., scalars ..., "tensors": [...]}
    then       one line per tensor: name, shape joined by "x", then the row-major values
               as repr() floats, all tab separated
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .applications import DesignerSpec, StackelbergGame
from .errors import UnsupportedStructureError, ValidationError
from .mdp_core import IncentiveMap, ParamMDP
from .policy import Regularizer, RegKind
from .sampling import make_rng
from .zerosum import ZeroSumGame

logger = logging.getLogger(__name__)

FORMAT_NAME = "pbrl-env"
FORMAT_VERSION = 1
FULL_STACKELBERG_STATES = 100
DESK_STACKELBERG_STATES = 20
INCENTIVE_SCALE = 0.2


class EnvKind(str, Enum):
    STACKELBERG = "stackelberg"
    INCENTIVE = "incentive"
    SPARSE_CHAIN = "sparse_chain"
    RANDOM_MDP = "random_mdp"


STREAMS = {EnvKind.STACKELBERG: 101, EnvKind.INCENTIVE: 102, EnvKind.SPARSE_CHAIN: 103, EnvKind.RANDOM_MDP: 104}


@dataclass(frozen=True)
class EnvRecipe:
    kind: EnvKind = EnvKind.STACKELBERG
    n_states: int = DESK_STACKELBERG_STATES
    n_actions: int = 5
    # follower / player-2 actions; ignored by single-agent kinds
    n_actions2: int = 5
    threshold: float = 0.7
    gamma: float = 0.9
    tau: float = 0.05
    # sparse chain: probability that a move goes the other way
    slip: float = 0.0
    # incentive: designer cost c(s) ~ cost_scale * U[0, 1]
    cost_scale: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if min(self.n_states, self.n_actions, self.n_actions2) < 1:
            raise ValidationError("recipe sizes must be positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {self.threshold}")
        if not 0.0 <= self.slip <= 1.0:
            raise ValidationError(f"slip must lie in [0, 1], got {self.slip}")
        if self.cost_scale < 0.0:
            raise ValidationError("cost_scale must be nonnegative")

    @classmethod
    def stackelberg(cls, seed: int = 0, full_size: bool = False, **overrides) -> "EnvRecipe":
        n = FULL_STACKELBERG_STATES if full_size else DESK_STACKELBERG_STATES
        return cls(**{"kind": EnvKind.STACKELBERG, "n_states": n, "seed": seed, **overrides})

    @classmethod
    def incentive(cls, seed: int = 0, **overrides) -> "EnvRecipe":
        return cls(**{"kind": EnvKind.INCENTIVE, "n_states": 10, "threshold": 0.0, "seed": seed, **overrides})

    @classmethod
    def sparse_chain(cls, n_states: int = 6, seed: int = 0, **overrides) -> "EnvRecipe":
        base = {"kind": EnvKind.SPARSE_CHAIN, "n_states": n_states, "n_actions": 2, "tau": 0.0, "seed": seed}
        return cls(**{**base, **overrides})

    @classmethod
    def random_mdp(cls, n_states: int = 5, n_actions: int = 3, seed: int = 0, **overrides) -> "EnvRecipe":
        base = {"kind": EnvKind.RANDOM_MDP, "n_states": n_states, "n_actions": n_actions, "threshold": 0.0, "seed": seed}
        return cls(**{**base, **overrides})


def _rewards(rng: np.random.Generator, shape: Tuple[int, ...], threshold: float) -> np.ndarray:
    r = rng.random(shape)
    r[r < threshold] = 0.0
    return r


def _transitions(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    w = 1.0 - rng.random(shape)
    return w / w.sum(axis=-1, keepdims=True)


def _regularizer(tau: float) -> Regularizer:
    return Regularizer.entropy() if tau > 0 else Regularizer.none()


def _require(recipe: EnvRecipe, kind: EnvKind) -> np.random.Generator:
    if recipe.kind != kind:
        raise ValidationError(f"recipe of kind {recipe.kind.value!r} passed to the {kind.value} generator")
    return make_rng(recipe.seed, STREAMS[kind])


def gen_stackelberg(recipe: EnvRecipe) -> StackelbergGame:
    rng = _require(recipe, EnvKind.STACKELBERG)
    S, Al, Af = recipe.n_states, recipe.n_actions, recipe.n_actions2
    r_leader = _rewards(rng, (S, Al, Af), recipe.threshold)
    r_follower = _rewards(rng, (S, Al, Af), recipe.threshold)
    P = _transitions(rng, (S, Al, Af, S))
    reg = _regularizer(recipe.tau)
    return StackelbergGame(
        S, Al, Af, recipe.gamma, recipe.tau, reg, reg, r_leader, r_follower, P, np.full(S, 1.0 / S)
    )


def gen_incentive(recipe: EnvRecipe) -> Tuple[DesignerSpec, ZeroSumGame]:
    """Designer chain plus a zero-sum game with r_x = r + 0.2 sigmoid(x)."""
    rng = _require(recipe, EnvKind.INCENTIVE)
    S, A1, A2 = recipe.n_states, recipe.n_actions, recipe.n_actions2
    rho = np.full(S, 1.0 / S)
    P_id = _transitions(rng, (S, A1, A2, S))
    r_id = _rewards(rng, (S, A1, A2), recipe.threshold)
    cost = recipe.cost_scale * rng.random(S)
    P = _transitions(rng, (S, A1, A2, S))
    r = _rewards(rng, (S, A1, A2), recipe.threshold)
    designer = DesignerSpec(P_id, r_id, cost, recipe.gamma, rho)
    game = ZeroSumGame(
        S, A1, A2, recipe.gamma, recipe.tau, _regularizer(recipe.tau), IncentiveMap(r, INCENTIVE_SCALE), P, rho
    )
    return designer, game


def gen_sparse_chain(recipe: EnvRecipe) -> ParamMDP:
    """Action 0 steps back, action 1 steps forward; reward 1 only in the last state."""
    _require(recipe, EnvKind.SPARSE_CHAIN)
    n = recipe.n_states
    idx = np.arange(n)
    back, forward = np.maximum(idx - 1, 0), np.minimum(idx + 1, n - 1)
    P = np.zeros((n, 2, n))
    P[idx, 0, back] += 1.0 - recipe.slip
    P[idx, 0, forward] += recipe.slip
    P[idx, 1, forward] += 1.0 - recipe.slip
    P[idx, 1, back] += recipe.slip
    reward = np.zeros((n, 2))
    reward[n - 1, :] = 1.0
    return ParamMDP.tabular(reward, P, recipe.gamma, recipe.tau, _regularizer(recipe.tau))


def gen_random_mdp(recipe: EnvRecipe) -> ParamMDP:
    rng = _require(recipe, EnvKind.RANDOM_MDP)
    S, A = recipe.n_states, recipe.n_actions
    reward = _rewards(rng, (S, A), recipe.threshold)
    P = _transitions(rng, (S, A, S))
    return ParamMDP.tabular(reward, P, recipe.gamma, recipe.tau, _regularizer(recipe.tau))


GENERATORS = {
    EnvKind.STACKELBERG: gen_stackelberg,
    EnvKind.INCENTIVE: gen_incentive,
    EnvKind.SPARSE_CHAIN: gen_sparse_chain,
    EnvKind.RANDOM_MDP: gen_random_mdp,
}


def generate(recipe: EnvRecipe):
    return GENERATORS[recipe.kind](recipe)


Environment = Union[ParamMDP, StackelbergGame, Tuple[DesignerSpec, ZeroSumGame]]


def _reg_fields(prefix: str, reg: Regularizer, scalars: Dict, tensors: Dict) -> None:
    scalars[f"{prefix}regularizer"] = reg.kind.value
    if reg.reference is not None:
        tensors[f"{prefix}kl_reference"] = np.asarray(reg.reference, dtype=float)


def _read_reg(prefix: str, scalars: Dict, tensors: Dict) -> Regularizer:
    kind = RegKind(scalars[f"{prefix}regularizer"])
    return Regularizer(kind, tensors.get(f"{prefix}kl_reference"))


def _flatten(env: Environment) -> Tuple[str, Dict[str, object], Dict[str, np.ndarray]]:
    if isinstance(env, ParamMDP):
        if env.reward_map.depends_on_x or env.transition_map.depends_on_x:
            raise UnsupportedStructureError("only x-independent MDPs are serializable")
        scalars = {"gamma": env.gamma, "tau": env.tau}
        tensors = {
            "reward": env.reward(np.zeros(env.dim_x)),
            "transition": env.transition(np.zeros(env.dim_x)),
            "initial_dist": env.initial_dist,
        }
        _reg_fields("", env.regularizer, scalars, tensors)
        return "mdp", scalars, tensors
    if isinstance(env, StackelbergGame):
        scalars = {"gamma": env.gamma, "tau": env.tau}
        tensors = {
            "r_leader": env.r_leader,
            "r_follower": env.r_follower,
            "transition": env.transition,
            "initial_dist": env.initial_dist,
        }
        _reg_fields("leader_", env.reg_leader, scalars, tensors)
        _reg_fields("follower_", env.reg_follower, scalars, tensors)
        return "stackelberg", scalars, tensors
    designer, game = env
    if not isinstance(game.reward_map, IncentiveMap):
        raise UnsupportedStructureError("only incentive-parameterized zero-sum games are serializable")
    scalars = {"gamma": game.gamma, "tau": game.tau, "designer_gamma": designer.gamma, "scale": game.reward_map.scale}
    tensors = {
        "designer_transition": designer.transition,
        "designer_reward": designer.reward,
        "designer_cost": designer.cost,
        "designer_initial_dist": designer.initial_dist,
        "reward_base": game.reward_map.base,
        "transition": game.transition,
        "initial_dist": game.initial_dist,
    }
    _reg_fields("", game.regularizer, scalars, tensors)
    return "incentive", scalars, tensors


def save_environment(env: Environment, path: Union[str, Path], recipe: Optional[EnvRecipe] = None) -> Path:
    kind, scalars, tensors = _flatten(env)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        **scalars,
        "tensors": list(tensors),
    }
    if recipe is not None:
        header["recipe"] = {**asdict(recipe), "kind": recipe.kind.value}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=float)
            shape = "x".join(str(d) for d in arr.shape)
            values = "\t".join(repr(float(v)) for v in arr.ravel())
            fh.write(f"{name}\t{shape}\t{values}\n")
    logger.info("wrote %s environment to %s", kind, path)
    return path


def _parse_tensor(line: str) -> Tuple[str, np.ndarray]:
    name, shape_text, *values = line.rstrip("\n").split("\t")
    shape = tuple(int(d) for d in shape_text.split("x")) if shape_text else ()
    arr = np.array([float(v) for v in values], dtype=float)
    if arr.size != int(np.prod(shape)):
        raise ValidationError(f"tensor {name!r} has {arr.size} values for shape {shape}")
    return name, arr.reshape(shape)


def load_environment(path: Union[str, Path]) -> Environment:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ValidationError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path} is not a version-{FORMAT_VERSION} {FORMAT_NAME} file")
    tensors = dict(_parse_tensor(line) for line in lines[1:] if line.strip())
    missing = set(header["tensors"]) - set(tensors)
    if missing:
        raise ValidationError(f"{path} is missing tensors: {sorted(missing)}")

    kind = header["kind"]
    if kind == "mdp":
        return ParamMDP.tabular(
            tensors["reward"], tensors["transition"], header["gamma"], header["tau"],
            _read_reg("", header, tensors), tensors["initial_dist"],
        )
    if kind == "stackelberg":
        S, Al, Af = tensors["r_leader"].shape
        return StackelbergGame(
            S, Al, Af, header["gamma"], header["tau"],
            _read_reg("leader_", header, tensors), _read_reg("follower_", header, tensors),
            tensors["r_leader"], tensors["r_follower"], tensors["transition"], tensors["initial_dist"],
        )
    if kind == "incentive":
        S, A1, A2 = tensors["reward_base"].shape
        designer = DesignerSpec(
            tensors["designer_transition"], tensors["designer_reward"], tensors["designer_cost"],
            header["designer_gamma"], tensors["designer_initial_dist"],
        )
        game = ZeroSumGame(
            S, A1, A2, header["gamma"], header["tau"], _read_reg("", header, tensors),
            IncentiveMap(tensors["reward_base"], header["scale"]), tensors["transition"], tensors["initial_dist"],
        )
        return designer, game
    raise ValidationError(f"unknown environment kind {kind!r}")
