"""Attack-versus-fault detection for transformer current differential relays.

Relay currents are simulated, attacked and windowed around the relay trigger,
rendered as text prompts and classified by a fine-tuned transformer encoder.
"""

from .attacks import AttackKind, AttackSpec, NoiseSpec, Side, add_awgn, apply_attack, realized_snr_db
from .dataset import Dataset, SplitSpec, export, from_arrays, ingest, stratified_split
from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    DataError,
    RangeError,
    RecordError,
    RelayGuardError,
    TokenBudgetError,
)
from .relay import Phasor, RelayDecision, RelaySettings, detect_trigger, estimate_phasor, relay_decision
from .textualize import BASELINE, V1, V2, V3, PromptTemplate, TemplateId, textualize, tokenize
from .waveform import (
    FaultSpec,
    FaultType,
    Label,
    MeasurementWindow,
    SignalTrace,
    SystemConfig,
    capture_window,
    simulate_fault,
    simulate_steady_state,
)

__version__ = "0.1.0"
