"""Discrete-event simulator of validator message dissemination over Tor push."""

from .adversary import AdversaryPlan, DeanonVerdict, Observation
from .engine import Trace, decide_inclusion, run
from .latency import LatencyModel, latency
from .metrics import AttestationRecord, StatSummary
from .model import Dist, Message, SimConfig, SlotClock, duty_schedule, load_config, slot_of

__all__ = [
    "AdversaryPlan", "AttestationRecord", "DeanonVerdict", "Dist", "LatencyModel", "Message",
    "Observation", "SimConfig", "SlotClock", "StatSummary", "Trace", "decide_inclusion",
    "duty_schedule", "latency", "load_config", "run", "slot_of",
]
__version__ = "0.1.0"
