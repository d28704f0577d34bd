"""
A-RWKV services: primitives, WKV kernels, the network, data, training and benchmarks
"""

from .network import ARWKV, forward, load_pretrained, param_count
from .training import evaluate, lr_at, soft_ce_loss, train_loop
from .wkv import WKVStepInputs, WKVState, bi_wkv, wkv7_scan

__all__ = [
    'ARWKV',
    'forward',
    'load_pretrained',
    'param_count',
    'evaluate',
    'lr_at',
    'soft_ce_loss',
    'train_loop',
    'WKVStepInputs',
    'WKVState',
    'bi_wkv',
    'wkv7_scan',
]
