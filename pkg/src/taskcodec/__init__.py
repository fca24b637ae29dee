"""Task-oriented feature compression for multi-camera edge analytics.

Devices extract task-relevant features from frames, compress them with
learned hierarchical/temporal entropy models and a bit-exact range coder,
and a server fuses current and past features to predict grid occupancy.
"""

from .autodiff import (NetSpec, OptState, adam_step, gradient_check,
                       graph_backward, graph_forward)
from .entropy import (GaussianParams, HyperModel, TemporalModel, factorized_params,
                      gu_bits, gu_pmf, hyper_path, temporal_params)
from .harness import RateDistortionRecord, baseline_eval, evaluate_run, run_sweep
from .models import BundleConfig, ModelBundle, build_bundle
from .pipeline import (DeviceState, EncodedPacket, ServerState, decode_frame,
                       encode_frame, measure_rate, parse_packet, serialize_packet)
from .quantize import QuantizedFeature, add_uniform_noise, round_nearest
from .rangecoder import Bitstream, CdfTable, build_coding_tables, rc_decode, rc_encode
from .training import (LossReport, TrainConfig, loss_L1, loss_L2, loss_L3,
                       train_phase1, train_phase2, verify_variational_bound)
from .world import Dataset, WorldSpec, gen_dataset, load_dataset, save_dataset

__version__ = "0.1.0"
