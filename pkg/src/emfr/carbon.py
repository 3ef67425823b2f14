"""Power draw, PUE-adjusted energy, and CO2e accounting for training runs.

All arithmetic is kept at full precision; rounding to two decimals happens
only when a table is rendered, so totals balance against their rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import kvconfig

DEFAULT_PUE = 1.58
DEFAULT_EMISSION_FACTOR = 0.030  # kg CO2e per kWh


@dataclass(frozen=True)
class PowerProfile:
    """Hardware wattage of one training setting."""

    name: str
    n_cpus: int
    cpu_watts: float
    n_gpus: int
    gpu_watts: float
    dram_watts: float
    n_machines: int = 1
    pue: float = DEFAULT_PUE
    hours: float = 0.0

    def __post_init__(self) -> None:
        for field_name in ("n_cpus", "cpu_watts", "n_gpus", "gpu_watts",
                           "dram_watts", "n_machines", "hours"):
            if getattr(self, field_name) < 0:
                raise ValueError(f"{field_name} must be nonnegative")
        if self.pue < 1.0:
            raise ValueError("pue must be >= 1")


@dataclass(frozen=True)
class EmissionsRow:
    name: str
    total_watts: float
    hours: float
    energy_pue_kwh: float
    co2e_kg: float
    emission_factor: float


@dataclass(frozen=True)
class EmissionsReport:
    rows: tuple[EmissionsRow, ...]
    total_co2e_kg: float
    emission_factor: float


def total_power(profile: PowerProfile) -> float:
    """Total draw in watts: machines x (CPUs + DRAM + GPUs)."""
    per_machine = (profile.n_cpus * profile.cpu_watts
                   + profile.dram_watts
                   + profile.n_gpus * profile.gpu_watts)
    return profile.n_machines * per_machine


def energy(profile: PowerProfile) -> float:
    """PUE-adjusted energy in kWh over the profile's runtime."""
    return profile.pue * profile.hours * total_power(profile) / 1000.0


def co2e(energy_pue_kwh: float, factor: float = DEFAULT_EMISSION_FACTOR) -> float:
    if energy_pue_kwh < 0 or factor < 0:
        raise ValueError("energy and emission factor must be nonnegative")
    return factor * energy_pue_kwh


def report(profiles: list[PowerProfile],
           factor: float = DEFAULT_EMISSION_FACTOR) -> EmissionsReport:
    if not profiles:
        raise ValueError("at least one power profile is required")
    rows = []
    for profile in profiles:
        kwh = energy(profile)
        rows.append(EmissionsRow(
            name=profile.name,
            total_watts=total_power(profile),
            hours=profile.hours,
            energy_pue_kwh=kwh,
            co2e_kg=co2e(kwh, factor),
            emission_factor=factor,
        ))
    total = sum(row.co2e_kg for row in rows)
    return EmissionsReport(rows=tuple(rows), total_co2e_kg=total, emission_factor=factor)


def render_table(rep: EmissionsReport) -> str:
    """Aligned text table, one row per profile plus a total-CO2e row."""
    header = ("setting", "power (W)", "time (h)", "PUE*kWh", "CO2e (kg)")
    body = [
        (row.name, f"{row.total_watts:.0f}", f"{row.hours:g}",
         f"{row.energy_pue_kwh:.2f}", f"{row.co2e_kg:.2f}")
        for row in rep.rows
    ]
    body.append(("total CO2e", "", "", "", f"{rep.total_co2e_kg:.2f}"))
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header)).rstrip()]
    for r in body:
        lines.append("  ".join(
            r[i].ljust(widths[i]) if i == 0 else r[i].rjust(widths[i])
            for i in range(len(r))).rstrip())
    return "\n".join(lines)


def render_tsv(rep: EmissionsReport) -> str:
    lines = ["setting\tpower_w\ttime_h\tenergy_pue_kwh\tco2e_kg"]
    for row in rep.rows:
        lines.append(f"{row.name}\t{row.total_watts:.0f}\t{row.hours:g}"
                     f"\t{row.energy_pue_kwh:.2f}\t{row.co2e_kg:.2f}")
    lines.append(f"total\t\t\t\t{rep.total_co2e_kg:.2f}")
    return "\n".join(lines) + "\n"


def load_profile(path: str | Path) -> PowerProfile:
    """Read a profile from a key/value text file (see configs/carbon/)."""
    mapping = kvconfig.read_kv(path)
    return PowerProfile(
        name=kvconfig.get_str(mapping, "name", Path(path).stem),
        n_cpus=kvconfig.get_int(mapping, "n_cpus"),
        cpu_watts=kvconfig.get_float(mapping, "cpu_watts"),
        n_gpus=kvconfig.get_int(mapping, "n_gpus"),
        gpu_watts=kvconfig.get_float(mapping, "gpu_watts"),
        dram_watts=kvconfig.get_float(mapping, "dram_watts"),
        n_machines=kvconfig.get_int(mapping, "n_machines", 1),
        pue=kvconfig.get_float(mapping, "pue", DEFAULT_PUE),
        hours=kvconfig.get_float(mapping, "hours", 0.0),
    )
