"""Desk-scale residual-VQ speech tokenizer with teacher distillation on the first two levels."""

from .codecnet import EncoderDecoder, TrainConfig, Tokenizer, build_tokenizer, decode, encode, reconstruct, train
from .features import FormatError, TeacherEmbeddings, Waveform, read_wav, write_wav
from .rvq import RvqStack, TokenStream, pack_bitstream, rvq_decode, rvq_encode, unpack_bitstream
from .store import load_model, save_model
from .tasks import ConversionRequest, MetricReport, export_tokens, voice_convert

__version__ = "0.1.0"
