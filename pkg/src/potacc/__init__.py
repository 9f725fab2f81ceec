"""Power-of-two weight quantization inference toolkit.

Level tables for three 4-bit PoT schemes, int8 weight conversion, weight
preprocessing into packed shift codes, a bit-accurate shift-PE model, two
integer QMM engines, an analytic accelerator performance model and the file
formats that tie them together.
"""

from .errors import PotaccError
from .schemes import ALL_SCHEMES, APOT, MSQ, QKERAS, Kind, PoTScheme, generate_levels
from .quantizer import QuantParams, quantize_weights
from .weightprep import PackedWeightTensor, decode, encode, pack, prepare_weights, scale_correct, unpack
from .shift_pe import dot64, dot64_batch, pe_multiply
from .qmm import LayerSpec, im2col, qmm_mult, qmm_shift, run_layer, run_model
from .sim import AccelConfig, SimReport, energy, preset, simulate_layer, simulate_model, sweep
from .modelio import ModelFile, load_model, prep_model, save_model, synth_model

__version__ = "0.1.0"
