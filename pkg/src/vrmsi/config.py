"""Experiment configuration: one INI file with per-stage sections.

CLI flags override file values, which override the built-in defaults.  The
canonical dump of a parsed config (sorted keys, normalized values) is what
gets hashed into stage provenance.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

from vrmsi.sampling import AcquisitionParams


class ConfigError(ValueError):
    """Bad or inconsistent experiment configuration."""


_DEFAULTS = {
    "experiment": {"name": "desk", "out_dir": "runs/desk", "seed": "1234", "jobs": "1"},
    "phantom": {
        "rows": "96",
        "cols": "96",
        "n_coils": "4",
        "noise_sigma": "0.002",
        "field_span_khz": "4.0",
        "implant_amplitude_khz": "2.0",
        "implant_radius": "7.0",
        "texture": "0.1",
        "families": "mixed",
        "edges_per_slice": "2",
    },
    "split": {
        "train_subjects": "12",
        "val_subjects": "3",
        "test_subjects": "5",
        "slices_per_subject": "4",
    },
    "acquisition": {
        "tr_seconds": "4.0",
        "etl": "32",
        "n_concat": "2",
        "n_bins": "8",
        "bin_spacing_khz": "1.0",
        "fwhm_khz": "2.25",
        "accel_ky": "2",
        "accel_kz": "2",
        "pf_overscan": "8",
        "acs_rows": "16",
        "acs_cols": "16",
    },
    "recon": {
        "apod_sigma_fraction": "0.25",
        "kernel_ky": "5",
        "kernel_kz": "4",
        "ridge": "1e-4",
        "out_rows": "",
        "out_cols": "",
    },
    "model": {"n_levels": "5", "channels": "16,32,64,128,256"},
    "train": {"learning_rate": "2e-4", "epochs": "50", "batch_size": "4", "mode": "mj"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    out_dir: str
    seed: int
    jobs: int
    phantom: dict
    split: dict
    acquisition: dict
    recon: dict
    model: dict
    train: dict

    def acquisition_params(self) -> AcquisitionParams:
        a = self.acquisition
        return AcquisitionParams(
            tr_seconds=a["tr_seconds"],
            etl=a["etl"],
            n_concat=a["n_concat"],
            n_bins=a["n_bins"],
            matrix=(self.phantom["rows"], self.phantom["cols"]),
            accel=(a["accel_ky"], a["accel_kz"]),
            pf_overscan=a["pf_overscan"],
            acs=(a["acs_rows"], a["acs_cols"]),
        )

    def bin_centers(self) -> list[float]:
        n = self.acquisition["n_bins"]
        spacing = self.acquisition["bin_spacing_khz"]
        return [(i - (n - 1) / 2.0) * spacing for i in range(n)]

    def out_shape(self) -> tuple[int, int]:
        rows = self.recon["out_rows"] or self.phantom["rows"]
        cols = self.recon["out_cols"] or self.phantom["cols"]
        return (rows, cols)

    def canonical(self) -> str:
        parts = []
        for section in ("phantom", "split", "acquisition", "recon", "model", "train"):
            data = getattr(self, section)
            for key in sorted(data):
                parts.append(f"{section}.{key}={data[key]!r}")
        parts.append(f"experiment.seed={self.seed!r}")
        return "\n".join(parts)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def dataset_hash(self) -> str:
        """Identity of the generated dataset: phantom + split + seed only."""
        parts = []
        for section in ("phantom", "split"):
            data = getattr(self, section)
            for key in sorted(data):
                parts.append(f"{section}.{key}={data[key]!r}")
        parts.append(f"experiment.seed={self.seed!r}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


def _get(parser, section, key, conv, path):
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}: [{section}] {key} = {raw!r}: {exc}") from exc


def _parse_channels(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad channel list {raw!r}") from exc


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI config; ``overrides`` maps 'section.key' -> value."""
    parser = configparser.ConfigParser()
    parser.read_dict(_DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        if not parser.has_section(section) or key not in _DEFAULTS.get(section, {}):
            raise ConfigError(f"unknown config override {dotted}")
        parser.set(section, key, str(value))

    for section in parser.sections():
        if section not in _DEFAULTS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key in parser[section]:
            if key not in _DEFAULTS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")

    cfg = ExperimentConfig(
        name=parser.get("experiment", "name"),
        out_dir=parser.get("experiment", "out_dir"),
        seed=_get(parser, "experiment", "seed", int, path),
        jobs=_get(parser, "experiment", "jobs", int, path),
        phantom={
            "rows": _get(parser, "phantom", "rows", int, path),
            "cols": _get(parser, "phantom", "cols", int, path),
            "n_coils": _get(parser, "phantom", "n_coils", int, path),
            "noise_sigma": _get(parser, "phantom", "noise_sigma", float, path),
            "field_span_khz": _get(parser, "phantom", "field_span_khz", float, path),
            "implant_amplitude_khz": _get(parser, "phantom", "implant_amplitude_khz", float, path),
            "implant_radius": _get(parser, "phantom", "implant_radius", float, path),
            "texture": _get(parser, "phantom", "texture", float, path),
            "families": parser.get("phantom", "families"),
            "edges_per_slice": _get(parser, "phantom", "edges_per_slice", int, path),
        },
        split={
            "train_subjects": _get(parser, "split", "train_subjects", int, path),
            "val_subjects": _get(parser, "split", "val_subjects", int, path),
            "test_subjects": _get(parser, "split", "test_subjects", int, path),
            "slices_per_subject": _get(parser, "split", "slices_per_subject", int, path),
        },
        acquisition={
            "tr_seconds": _get(parser, "acquisition", "tr_seconds", float, path),
            "etl": _get(parser, "acquisition", "etl", int, path),
            "n_concat": _get(parser, "acquisition", "n_concat", int, path),
            "n_bins": _get(parser, "acquisition", "n_bins", int, path),
            "bin_spacing_khz": _get(parser, "acquisition", "bin_spacing_khz", float, path),
            "fwhm_khz": _get(parser, "acquisition", "fwhm_khz", float, path),
            "accel_ky": _get(parser, "acquisition", "accel_ky", int, path),
            "accel_kz": _get(parser, "acquisition", "accel_kz", int, path),
            "pf_overscan": _get(parser, "acquisition", "pf_overscan", int, path),
            "acs_rows": _get(parser, "acquisition", "acs_rows", int, path),
            "acs_cols": _get(parser, "acquisition", "acs_cols", int, path),
        },
        recon={
            "apod_sigma_fraction": _get(parser, "recon", "apod_sigma_fraction", float, path),
            "kernel_ky": _get(parser, "recon", "kernel_ky", int, path),
            "kernel_kz": _get(parser, "recon", "kernel_kz", int, path),
            "ridge": _get(parser, "recon", "ridge", float, path),
            "out_rows": _get(parser, "recon", "out_rows", lambda s: int(s) if s else 0, path),
            "out_cols": _get(parser, "recon", "out_cols", lambda s: int(s) if s else 0, path),
        },
        model={
            "n_levels": _get(parser, "model", "n_levels", int, path),
            "channels": _get(parser, "model", "channels", _parse_channels, path),
        },
        train={
            "learning_rate": _get(parser, "train", "learning_rate", float, path),
            "epochs": _get(parser, "train", "epochs", int, path),
            "batch_size": _get(parser, "train", "batch_size", int, path),
            "mode": parser.get("train", "mode"),
        },
    )
    _validate(cfg, path)
    return cfg


def _validate(cfg: ExperimentConfig, path) -> None:
    if cfg.split["train_subjects"] < 1 or cfg.split["val_subjects"] < 1 or cfg.split["test_subjects"] < 1:
        raise ConfigError("split counts must all be positive")
    if cfg.train["mode"] not in ("sj", "mj"):
        raise ConfigError("train mode must be 'sj' or 'mj'")
    if cfg.phantom["families"] not in ("single", "mixed"):
        raise ConfigError("phantom families must be 'single' or 'mixed'")
    n_bins = cfg.acquisition["n_bins"]
    coverage = n_bins * cfg.acquisition["bin_spacing_khz"]
    if cfg.phantom["field_span_khz"] < coverage / 2.0:
        raise ConfigError(
            f"field_span_khz {cfg.phantom['field_span_khz']} below half the spectral "
            f"coverage {coverage / 2.0}: outer bins would stay empty"
        )
    if len(cfg.model["channels"]) != cfg.model["n_levels"]:
        raise ConfigError("model channels list must have one entry per level")
    factor = 2 ** (cfg.model["n_levels"] - 1)
    out_rows, out_cols = cfg.out_shape()
    if out_rows % factor or out_cols % factor:
        raise ConfigError(
            f"recon output dims {out_rows}x{out_cols} must be divisible by {factor} "
            "for the network"
        )
    try:
        cfg.acquisition_params()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
