"""
Residual multilayer perceptrons on top of ndcore.

Hidden layers use leaky ReLU; consecutive hidden layers of equal width are
joined by an identity shortcut. The output layer is linear. Weights are stored
as (in_dim, out_dim) so a layer computes `x @ W + b`.
"""

from typing import Dict, List, Sequence

import numpy as np

from core.exceptions import ModelError, ShapeError
from core.ndcore import LEAKY_SLOPE, Parameter, Tensor, as_tensor, leaky_relu
from utils.logger import get_enhanced_logger

logger = get_enhanced_logger(__name__)


class Linear:
    """Affine layer with Kaiming-uniform weights and zero bias."""

    def __init__(self, in_dim: int, out_dim: int, name: str, rng: np.random.Generator):
        gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
        bound = gain * np.sqrt(3.0 / in_dim)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)),
                                name=f"{name}.weight", decay=True)
        self.bias = Parameter(np.zeros(out_dim), name=f"{name}.bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class ResidualMLP:
    """Feedforward network mapping (batch, in_dim) to (batch, out_dim)."""

    def __init__(self, in_dim: int, hidden_dims: Sequence[int], out_dim: int, seed: int,
                 name: str = "mlp"):
        dims = [in_dim, *hidden_dims, out_dim]
        if any(int(d) < 1 for d in dims):
            raise ModelError(f"all layer widths must be >= 1, got {dims}", field=name)

        rng = np.random.default_rng(seed)
        self.name = name
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden_dims = tuple(int(d) for d in hidden_dims)
        self.layers = [Linear(dims[i], dims[i + 1], f"{name}.layer{i}", rng)
                       for i in range(len(dims) - 1)]

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}.forward", h.shape, (None, self.in_dim))

        for i, layer in enumerate(self.layers[:-1]):
            out = leaky_relu(layer(h))
            # hidden -> hidden of equal width
            if i > 0 and layer.in_dim == layer.out_dim:
                out = out + h
            h = out
        return self.layers[-1](h)

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def __repr__(self) -> str:
        return f"ResidualMLP({self.name}: {self.in_dim} -> {list(self.hidden_dims)} -> {self.out_dim})"


def build_residual_mlp(in_dim: int, hidden_dims: Sequence[int], out_dim: int, seed: int,
                       name: str = "mlp") -> ResidualMLP:
    """Seeded residual MLP; an empty `hidden_dims` gives a single linear map."""
    network = ResidualMLP(in_dim, hidden_dims, out_dim, seed, name=name)
    logger.debug(f"built {network!r}")
    return network


def orthogonal_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random matrix with orthonormal columns (rows >= cols) or orthonormal rows
    (rows < cols), from the QR decomposition of a Gaussian matrix.
    """
    tall = rows >= cols
    a = rng.standard_normal((rows, cols) if tall else (cols, rows))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if tall else q.T


def orthogonal_init(network: ResidualMLP, seed: int) -> ResidualMLP:
    """Replace every weight with a seeded orthogonal matrix; biases stay zero."""
    rng = np.random.default_rng(seed)
    for layer in network.layers:
        rows, cols = layer.weight.shape
        layer.weight.data = orthogonal_matrix(rows, cols, rng)
        layer.bias.data = np.zeros(cols)
    return network
