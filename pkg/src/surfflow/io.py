"""Dataset manifests, image files, configuration files and estimate directories."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .energy import EnergyReport, EnergyWeights
from .errors import ConfigError
from .geom import CalibratedRig, PointCloud, load_calibration, read_cloud
from .raster import as_field, read_field, write_field
from .solver import PairEstimate, SolverConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REPORT_NAME = "report.json"
PAIR_FIELDS = ("O_f", "O_b", "D_t", "D_t1", "mask")


def read_image(path) -> np.ndarray:
    """8-bit PNG (gray or RGB) as an ``(H, W, C)`` float field in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_field(arr)


def write_image(image, path) -> None:
    image = as_field(image)
    data = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data[:, :, 0] if data.shape[2] == 1 else data).save(path)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_dataclass(cls, table: dict, where: str):
    """Instantiate ``cls`` from a config table, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**{k: _tuples(v) for k, v in table.items()})


def _tuples(value):
    # TOML arrays arrive as lists; the frozen dataclasses hold tuples
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def solver_config_from_dict(table: dict) -> SolverConfig:
    """``SolverConfig`` from a mapping; weights go in a nested ``weights`` table."""
    table = dict(table)
    weights = build_dataclass(EnergyWeights, table.pop("weights", {}), "[weights]")
    return dataclasses.replace(build_dataclass(SolverConfig, table, "solver config"), weights=weights)


def solver_config_to_dict(cfg: SolverConfig) -> dict:
    return dataclasses.asdict(cfg)


@dataclass(frozen=True)
class DatasetManifest:
    """Where a sequence lives on disk.

    Patterns are ``str.format`` templates with an ``epoch`` field, relative
    to ``root``. ``crop`` is ``(x0, y0, width, height)`` in pixels.
    """

    root: Path
    images: str
    clouds: str
    calibration: str
    first: int
    last: int
    frame_interval: float = 0.04
    crop: tuple[int, int, int, int] | None = None
    gt_flow: str | None = None
    gt_depth: str | None = None

    def __post_init__(self):
        if self.last <= self.first:
            raise ConfigError("manifest needs at least two frames (last > first)")
        if self.frame_interval <= 0:
            raise ConfigError("frame_interval must be positive")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            d = json.load(fh)
        try:
            crop = d.get("crop")
            return cls(
                root=path.parent,
                images=d["images"],
                clouds=d["clouds"],
                calibration=d["calibration"],
                first=int(d["frames"][0]),
                last=int(d["frames"][1]),
                frame_interval=float(d.get("frame_interval", 0.04)),
                crop=None if crop is None else tuple(int(c) for c in crop),
                gt_flow=d.get("gt_flow"),
                gt_depth=d.get("gt_depth"),
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ConfigError(f"{path}: malformed manifest ({exc})") from None

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "clouds": self.clouds,
            "calibration": self.calibration,
            "frames": [self.first, self.last],
            "frame_interval": self.frame_interval,
            "crop": None if self.crop is None else list(self.crop),
            "gt_flow": self.gt_flow,
            "gt_depth": self.gt_depth,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @property
    def epochs(self) -> list[int]:
        return list(range(self.first, self.last + 1))

    def path(self, pattern: str, epoch: int) -> Path:
        return self.root / pattern.format(epoch=epoch)

    def rig(self) -> CalibratedRig:
        rig = load_calibration(self.root / self.calibration)
        return rig if self.crop is None else rig.cropped(*self.crop)

    def image(self, epoch: int) -> np.ndarray:
        img = read_image(self.path(self.images, epoch))
        if self.crop is not None:
            x0, y0, w, h = self.crop
            img = img[y0 : y0 + h, x0 : x0 + w]
        return img

    def cloud(self, epoch: int) -> PointCloud:
        return read_cloud(self.path(self.clouds, epoch), epoch)

    def _gt(self, pattern, epoch):
        if pattern is None or not self.path(pattern, epoch).exists():
            return None
        f = read_field(self.path(pattern, epoch))
        if self.crop is not None:
            x0, y0, w, h = self.crop
            f = f[y0 : y0 + h, x0 : x0 + w]
        return f

    def flow_truth(self, epoch: int):
        return self._gt(self.gt_flow, epoch)

    def depth_truth(self, epoch: int):
        return self._gt(self.gt_depth, epoch)


def pair_dir(out, epoch: int) -> Path:
    return Path(out) / f"pair_{epoch:06d}"


def is_complete(directory) -> bool:
    return (Path(directory) / REPORT_NAME).exists()


def save_estimate(est: PairEstimate, directory, config: SolverConfig) -> None:
    """Write the rasters, then the JSON report; the report marks completion."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in PAIR_FIELDS:
        write_field(getattr(est, name), directory / f"{name}.dflo")
    trace = [t.total for t in est.energy_trace]
    report = {
        "epochs": list(est.epochs),
        "energy": est.report.to_dict(),
        "trace": {"entries": len(trace), "first": trace[0] if trace else None, "last": trace[-1] if trace else None},
        "config": solver_config_to_dict(config),
    }
    with open(directory / REPORT_NAME, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class StoredEstimate:
    """A pair estimate read back from disk (float32 precision)."""

    epochs: tuple[int, int]
    O_f: np.ndarray
    O_b: np.ndarray
    D_t: np.ndarray
    D_t1: np.ndarray
    mask: np.ndarray
    report: dict


def load_estimate(directory) -> StoredEstimate:
    directory = Path(directory)
    if not is_complete(directory):
        raise FileNotFoundError(f"{directory}: no {REPORT_NAME}; estimate incomplete")
    with open(directory / REPORT_NAME) as fh:
        report = json.load(fh)
    fields = {name: read_field(directory / f"{name}.dflo") for name in PAIR_FIELDS}
    return StoredEstimate(tuple(report["epochs"]), report=report, **fields)


def load_estimates(out) -> list[StoredEstimate]:
    """All complete pair estimates under ``out``, ordered by epoch."""
    dirs = sorted(p for p in Path(out).glob("pair_*") if is_complete(p))
    return [load_estimate(d) for d in dirs]


def energy_report_from_dict(d: dict) -> EnergyReport:
    w = EnergyWeights(**d["weights"])
    return EnergyReport(**{k: v for k, v in d.items() if k != "weights"}, weights=w)
