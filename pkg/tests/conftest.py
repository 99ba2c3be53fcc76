import numpy as np
import pytest

from hrlport.market_data import PriceSeries


def finite_difference(net, scalar_fn, h=1e-5):
    """Central-difference gradient of scalar_fn() w.r.t. every parameter.

    Returns arrays in (weights, bias) layer order, matching the layout of
    a flattened GradientRecord.
    """
    grads = []
    for layer in net.layers:
        for arr in (layer.weights, layer.bias):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = scalar_fn()
                arr[idx] = orig - h
                down = scalar_fn()
                arr[idx] = orig
                g[idx] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def flatten_record(record):
    out = []
    for w, b in zip(record.weights, record.biases):
        out.extend([w, b])
    return out


def make_series(prices, tickers=None, start="2020-01-01"):
    """PriceSeries from a (days, assets) array with a synthetic calendar."""
    prices = np.asarray(prices, dtype=np.float64)
    if prices.ndim == 1:
        prices = prices[:, None]
    n = prices.shape[1]
    tickers = tuple(tickers) if tickers else tuple(f"A{i}" for i in range(n))
    calendar = np.datetime64(start) + np.arange(prices.shape[0])
    return PriceSeries(tickers, prices, calendar.astype("datetime64[D]"))


def random_walk_series(rng, n_days, n_assets, drift=0.0, vol=0.01, p0=100.0):
    """Geometric random walk prices, seeded; drift may be per-asset."""
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (n_assets,))
    steps = rng.normal(drift, vol, size=(n_days - 1, n_assets))
    logp = np.concatenate([np.zeros((1, n_assets)), np.cumsum(steps, axis=0)])
    return make_series(p0 * np.exp(logp))


def constant_aux_policy(weights, window_periods, days_per_period, bound=1.0):
    """Auxiliary policy that always emits ``weights`` regardless of state."""
    import numpy as np

    from hrlport.agents import AuxiliaryPolicy, state_dim
    from hrlport.neural import DenseNetwork, Layer

    w = np.asarray(weights, dtype=float)
    assert np.all(np.abs(w / bound) < 1.0)
    dim = state_dim(len(w), window_periods, days_per_period)
    layer = Layer(np.zeros((len(w), dim)), np.arctanh(w / bound), "tanh")
    return AuxiliaryPolicy(DenseNetwork([layer]), bound)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
