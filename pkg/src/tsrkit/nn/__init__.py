from .layers import activate, batch_norm, conv2d, fold_batch_norm, maxpool, sigmoid, softmax
from .network import Network, count_flops, forward, layer_flops
from .region import RegionOutput, decode_region_arrays, region_decode
from .spec import (BUNDLED_CONFIGS, ConvSpec, MaxPoolSpec, MissingField, NetworkSpec, RegionSpec,
                   UnknownSection, bundled_config, load_network_spec, parse_network_spec,
                   resolve_network_spec)
from .weights import (BadHeader, ConvWeights, SizeMismatch, WeightHeader, WeightStore,
                      dump_weights, load_weights, random_weights, read_weights, write_weights,
                      zero_weights)
