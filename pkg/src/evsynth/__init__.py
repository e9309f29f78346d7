"""Frame synthesis from a key-frame and an event stream.

Submodules: ``event_core`` (events, accumulation, simulated event frames),
``event_io`` (EVT1, PNM, manifests), ``tensor`` (reverse-mode autodiff on
numpy), ``models`` (U-Net generator, PatchGAN discriminator, ConvLSTM
refiner), ``training``, ``metrics``, ``pipeline`` and ``cli``.
"""

from .event_core import (AccumulationWindow, Event, EventFrame, accumulate_events,
                         accumulate_windows, brightness, quantize_log_diff, simulate_event_frame)
from .event_io import decode_events, encode_events, read_image, write_image
from .metrics import MetricReport, evaluate_sequence, evaluate_sequences
from .models import Discriminator, Generator, Refiner
from .pipeline import PipelineConfig, synth_sequence

__version__ = "0.1.0"
