"""Reference topologies and their parameter presets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import CurrentTtfsParams, LinearTtfsParams
from .emulator import EmulatorConfig
from .graph import Dense, NetworkGraph, NeuronParams, ReceptiveField, add_input, add_population, add_projection
from .trainer import RegularizerConstants, TrainConfig


@dataclass(frozen=True)
class OperationPoint:
    """Calibration targets in on-chip ADC units, kept as metadata only."""

    i_synin_gm: tuple[int, ...]
    synapse_dac_bias: tuple[int, ...]
    leak: tuple[int, ...]
    reset: tuple[int, ...]
    threshold: tuple[int, ...]
    membrane_capacitance: int
    refractory_time: tuple[float, ...]


MNIST_OPERATION_POINT = OperationPoint((800, 400), (850, 700), (80,), (80,), (120,), 63, (1.0,))
EUROSAT_OPERATION_POINT = OperationPoint(
    (350, 350, 300), (1000, 1000, 600), (100, 100, 120), (100, 100, 120), (160, 160, 140), 63, (1.0, 1.0, 0.4)
)

MNIST_TRAIN = TrainConfig(
    batch_size=100, learning_rate=0.002, epochs=100, lr_decay=0.985, dropout_p=0.15, superspike_alpha=50.0,
    readout_scale=3.0,
)
MNIST_REG = RegularizerConstants(burst=0.0025, theta_h=0.0033, theta_o=0.0033, v_o=0.00016, gamma=0.985)
MNIST_EMULATOR = EmulatorConfig(dt=1.0, duration=30.0)
MNIST_ENCODER = LinearTtfsParams(T=30.0, dt=1.0, x_min=0.0, x_max=1.0)

EUROSAT_TRAIN = TrainConfig(
    batch_size=64, learning_rate=0.001, epochs=500, lr_milestones=(10, 20, 30, 40, 50, 60), dropout_p=0.0,
    superspike_alpha=10.0, patience=25,
)
EUROSAT_EMULATOR = EmulatorConfig(dt=1.0, duration=64.0)
EUROSAT_ENCODER = CurrentTtfsParams(tau_en=20.0, theta_en=0.32, x_min=0.1, sigma_in=0.003, T=64.0)


def _init(rng, shape, fan_in, mean_gain, std_gain):
    return rng.normal(mean_gain / fan_in, std_gain / np.sqrt(fan_in), size=shape)


def mnist_network(seed=0, hidden: int = 256) -> NetworkGraph:
    """784 -> LIF hidden -> 10 LI readout."""
    rng = np.random.default_rng(seed)
    g = NetworkGraph()
    x = add_input(g, 784, "x")
    h = add_population(g, hidden, NeuronParams.lif(tau_mem=6.0, tau_syn=5.7, v_thresh=1.0))
    o = add_population(g, 10, NeuronParams.li(tau_mem=6.0, tau_syn=5.7))
    add_projection(g, x, h, Dense(), _init(rng, (784, hidden), 784, 2.0, 1.0))
    add_projection(g, h, o, Dense(), _init(rng, (hidden, 10), hidden, 0.0, 0.3))
    return g


def eurosat_network(seed=0, image_hw: tuple[int, int] = (64, 64)) -> NetworkGraph:
    """Receptive-field front layer over HWC RGB images, then 128 LIF and
    a 10-class LI readout."""
    rng = np.random.default_rng(seed)
    g = NetworkGraph()
    hgt, wid = image_hw
    x = add_input(g, hgt * wid * 3, "x")
    rf = ReceptiveField(3, 3, 3, 3, hgt, wid)
    n1 = rf.post_size(hgt * wid * 3)
    lif = NeuronParams.lif(tau_mem=10.0, tau_syn=10.0, v_thresh=1.0)
    h1 = add_population(g, n1, lif)
    h2 = add_population(g, 128, lif)
    o = add_population(g, 10, NeuronParams.li(tau_mem=10.0, tau_syn=10.0))
    add_projection(g, x, h1, rf, _init(rng, (n1, 27), 27, 3.0, 1.0))
    add_projection(g, h1, h2, Dense(), _init(rng, (n1, 128), n1, 4.0, 1.0))
    add_projection(g, h2, o, Dense(), _init(rng, (128, 10), 128, 0.0, 0.3))
    return g


EUROSAT_SPLIT = {"p1": 8}
