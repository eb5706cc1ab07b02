"""Receivers with hand-set detector parameters for protocol tests."""
import math

from laserdamage.apd_device import ApdState, DetectorCircuit
from laserdamage.qkd_sim import BobReceiver, DetectorSlot

V0 = 225.0


def slot_with(eta=0.5, d=0.0, i_dark=0.0, setpoint=15.0, slot_duration=1e-9):
    """A detector with efficiency ``eta`` and per-slot dark probability ``d``."""
    dcr = -math.log1p(-d) / slot_duration
    state = ApdState(v_br_orig=V0, dcr_base=dcr, i_dark=i_dark)
    circuit = DetectorCircuit(
        v_bias=V0 + setpoint, eta_nominal=eta, v_ov_nominal=setpoint,
        slot_duration=slot_duration,
    )
    return DetectorSlot(state, circuit)


def receiver(eta=0.5, d=0.0, **kw):
    return BobReceiver([slot_with(eta, d, **kw) for _ in range(4)])


def blinded_receiver(setpoint=11.0):
    return BobReceiver([slot_with(1.0, 0.0, i_dark=200e-6, setpoint=setpoint) for _ in range(4)])
