import numpy as np

from tempbal.weight_store import LayerTensor, WeightSnapshot


def random_snapshot(rng: np.random.Generator, max_layers: int = 4) -> WeightSnapshot:
    """Random mix of dense and conv layers with finite float64 values."""
    n_layers = int(rng.integers(1, max_layers + 1))
    layers = []
    for i in range(n_layers):
        if rng.random() < 0.5:
            dims = (int(rng.integers(1, 12)), int(rng.integers(1, 12)))
        else:
            dims = tuple(int(d) for d in rng.integers(1, 5, size=4))
        count = int(np.prod(dims))
        values = rng.normal(scale=10.0 ** rng.integers(-3, 4), size=count)
        layers.append(LayerTensor(name=f"layer{i}", dims=dims, values=values))
    return WeightSnapshot(epoch=int(rng.integers(0, 1000)), layers=tuple(layers))
