"""
Named parameter store with deterministic initialization.

Every parameter draws from its own Philox stream keyed by the init seed and
the CRC of its name, so a layer's initial weights do not depend on which
other layers a head variant creates.
"""
import logging
import zlib
from typing import Dict, Iterator, List, Tuple

import numpy as np

from app.services import rng as rng_streams
from app.tensorcore import Tensor

logger = logging.getLogger(__name__)

PRIOR_PROB = 0.01


def prior_bias(prob: float = PRIOR_PROB) -> float:
    return float(-np.log((1 - prob) / prob))


class ParamStore:
    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return rng_streams.counter_rng(self.seed, rng_streams.PARAM_INIT, zlib.crc32(name.encode()))

    def create(self, name: str, shape: Tuple[int, ...], init: str = "zeros", value: float = 0.0) -> Tensor:
        if name in self._params:
            raise KeyError(f"Parameter {name} already exists")
        if init == "he":
            fan_in = int(np.prod(shape[1:]))
            data = self._rng(name).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif init == "normal":
            data = self._rng(name).normal(0.0, 0.01, size=shape)
        elif init == "constant":
            data = np.full(shape, value)
        else:
            data = np.zeros(shape)
        tensor = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def conv(self, prefix: str, c_out: int, c_in: int, k: int, init: str = "he", bias: float = 0.0):
        self.create(f"{prefix}.weight", (c_out, c_in, k, k), init)
        self.create(f"{prefix}.bias", (c_out,), "constant", bias)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def delete_prefix(self, prefix: str) -> int:
        doomed = [n for n in self._params if n.startswith(prefix)]
        for n in doomed:
            del self._params[n]
        return len(doomed)

    def named(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def state(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            self._params[n].data = np.ascontiguousarray(arr, dtype=self.dtype).reshape(self._params[n].shape)
