"""Synthetic trial workload: patients, wearable readings, labs and shipment telemetry.

All values are made up.  Telemetry deviations are planted at fixed slots
chosen up front, so the set of injected deviations is known exactly.
"""

from __future__ import annotations

import random
import string
from dataclasses import dataclass

from .scenario import WorkloadConfig

TEMP_RANGE = (2.0, 8.0)
RH_RANGE = (30.0, 65.0)


@dataclass(frozen=True)
class Patient:
    patient_id: str
    country: str
    site: str


def patient_roster(cfg: WorkloadConfig) -> list[Patient]:
    """Ids follow the site-prefix-plus-number form, e.g. AHJ1001."""
    roster = []
    letters = string.ascii_uppercase
    for c in range(cfg.countries):
        for s in range(cfg.sites_per_country):
            prefix = letters[c % 26] + letters[(7 + s) % 26] + "J"
            for p in range(cfg.patients_per_site):
                roster.append(Patient(f"{prefix}{1001 + p}", f"country-{c + 1}", f"site-{c + 1}.{s + 1}"))
    return roster


class WorkloadGenerator:
    def __init__(self, cfg: WorkloadConfig, rounds: int, rng: random.Random):
        self.cfg = cfg
        self.rng = rng
        slots = [(r, k) for r in range(rounds) for k in range(cfg.telemetry_per_round)]
        self.deviation_slots = frozenset(rng.sample(slots, cfg.telemetry_deviations)) if slots else frozenset()

    def vitals(self, round_index: int, patient: Patient, device: str) -> dict:
        rng = self.rng
        reading = {
            "patient": patient.patient_id,
            "device": device,
            "visit": round_index,
            "heart_rate": rng.randint(55, 110),
            "spo2": rng.randint(92, 100),
            "body_temp_c": round(rng.uniform(36.0, 37.8), 1),
        }
        if device == "EcgPatch":
            reading["ecg_flag"] = rng.random() < 0.1
        return reading

    def consent(self, patient: Patient) -> dict:
        return {"patient": patient.patient_id, "consent": "signed", "version": 1}

    def lab(self, round_index: int, index: int, patient: Patient) -> dict:
        body = "".join(self.rng.choice(string.ascii_lowercase + " ") for _ in range(self.cfg.lab_report_bytes))
        return {"patient": patient.patient_id, "visit": round_index, "panel": f"panel-{index}", "report": body}

    def telemetry(self, round_index: int, index: int) -> tuple[dict, bool]:
        rng = self.rng
        temp = round(rng.uniform(2.5, 7.5), 1)
        rh = round(rng.uniform(35.0, 60.0), 1)
        deviated = (round_index, index) in self.deviation_slots
        if deviated:
            which = rng.randrange(4)
            if which == 0:
                temp = round(rng.uniform(8.5, 12.0), 1)
            elif which == 1:
                temp = round(rng.uniform(-2.0, 1.5), 1)
            elif which == 2:
                rh = round(rng.uniform(66.0, 80.0), 1)
            else:
                rh = round(rng.uniform(15.0, 29.0), 1)
        shipment = {"shipment": f"IMP-{round_index:03d}-{index:02d}", "temperature_c": temp, "humidity_rh": rh}
        return shipment, deviated
