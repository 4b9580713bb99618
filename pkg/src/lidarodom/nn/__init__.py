"""Dense-tensor network engine: layers, graph, training, weight files."""
from .graph import LayerGraph
from .layers import Concat, Conv2D, FullyConnected, MaxPool2D, ReLU, Softmax
from .serialize import load_into, load_weights, save_weights
from .topology import classification_network, cnn_part, regression_network, stock
from .train import SGD, cross_entropy, mse, train_step

__all__ = [
    "LayerGraph", "Concat", "Conv2D", "FullyConnected", "MaxPool2D", "ReLU", "Softmax",
    "load_into", "load_weights", "save_weights",
    "classification_network", "cnn_part", "regression_network", "stock",
    "SGD", "cross_entropy", "mse", "train_step",
]
