"""Synthetic paired corpus: multichannel beat-train signals plus token reports.

Each record is driven by two groups of latent factors.  Semantic codes are
binary findings that deform the waveform *and* are written into the report
(irregular rhythm, wide QRS, ST elevation, T-wave inversion).  Structural
factors deform the waveform but are never mentioned in the report
(chest-vs-limb amplitude balance, T-wave width).  The corpus exists to
measure how much of each factor group a learned embedding retains.

All generator constants live in :class:`GeneratorConfig` or in the module
tables below; the manifest stores the config so datasets are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ecgtext.exceptions import ConfigError, DataError

__all__ = [
    "GeneratorConfig",
    "DatasetManifest",
    "SignalRecord",
    "Dataset",
    "generate_corpus",
    "save_dataset",
    "load_dataset",
    "VOCAB",
    "SEMANTIC_PHRASES",
]

FORMAT_VERSION = 1

# token vocabulary and the report phrase for each semantic code, in code order
VOCAB = [
    "normal",
    "irregular",
    "rhythm",
    "wide",
    "qrs",
    "st",
    "elevation",
    "t",
    "wave",
    "inversion",
]
SEMANTIC_PHRASES = [
    ("irregular", "rhythm"),
    ("wide", "qrs"),
    ("st", "elevation"),
    ("t", "wave", "inversion"),
]

# beat morphology in samples at 100 Hz: (offset from beat center, width, amplitude)
_P_WAVE = (-18.0, 2.5, 0.18)
_QRS = (0.0, 1.6, 1.0)
_T_WAVE = (28.0, 5.0, 0.35)
_ST_BUMP = (13.0, 4.0, 0.28)  # added only when the ST code is active

_RR_RANGE = (70.0, 90.0)  # per-record base beat interval, samples
_RR_JITTER = 0.22  # beat-to-beat spread when the irregular-rhythm code is active
_QRS_WIDEN = 2.4  # QRS width multiplier for the wide-QRS code
_T_WIDTH_SPAN = (0.45, 1.9)  # T width multiplier across its structural factor
_CHEST_GAIN_SPAN = (0.35, 1.9)  # chest-lead gain across its structural factor
_MIX_STRENGTH = 0.25  # off-diagonal strength of the fixed lead-mixing matrix
_TABLE_SEED = 9001  # seeds the fixed mixing matrix and lead profiles

_STREAM_RECORD = 1  # rng stream tag: (dataset_seed, stream, record_id)


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic corpus."""

    n: int = 1024
    c: int = 12
    t: int = 1000
    k_s: int = 4
    k_m: int = 2
    prevalence: tuple[float, ...] = (0.3, 0.3, 0.3, 0.3)
    noise_sigma: float = 0.25

    def validate(self) -> "GeneratorConfig":
        if self.n < 0:
            raise ConfigError("n must be >= 0")
        if self.c < 1 or self.t < 2:
            raise ConfigError("need c >= 1 and t >= 2")
        if not 1 <= self.k_s <= len(SEMANTIC_PHRASES):
            raise ConfigError(f"k_s must be in 1..{len(SEMANTIC_PHRASES)}")
        if not 1 <= self.k_m <= 2:
            raise ConfigError("k_m must be 1 or 2 (only two structural factors are mapped to the waveform)")
        if len(self.prevalence) != self.k_s:
            raise ConfigError("prevalence must list one value per semantic class")
        for value in self.prevalence:
            if not 0.0 < value < 1.0:
                raise ConfigError(f"prevalence {value} outside (0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self


@dataclass(frozen=True)
class DatasetManifest:
    n: int
    c: int
    t: int
    vocab: list[str]
    k_s: int
    k_m: int
    class_descriptions: list[list[int]]  # token ids, one sequence per semantic class
    generator_config: dict
    format_version: int = FORMAT_VERSION

    @property
    def n_labels(self) -> int:
        return self.k_s + self.k_m


@dataclass(frozen=True)
class SignalRecord:
    """One paired example."""

    signal: np.ndarray  # [C, T]
    report: np.ndarray  # token ids
    semantic_labels: np.ndarray  # [k_s] in {0, 1}
    structural_labels: np.ndarray  # [k_m] in {0, 1}


class Dataset:
    """In-memory corpus with column storage and per-record views."""

    def __init__(
        self,
        manifest: DatasetManifest,
        signals: np.ndarray,
        reports: list[np.ndarray],
        labels: np.ndarray,
    ):
        if signals.shape != (manifest.n, manifest.c, manifest.t):
            raise DataError(
                f"signals shape {signals.shape} does not match manifest "
                f"({manifest.n}, {manifest.c}, {manifest.t})"
            )
        if len(reports) != manifest.n:
            raise DataError(f"got {len(reports)} reports for {manifest.n} records")
        if labels.shape != (manifest.n, manifest.n_labels):
            raise DataError(
                f"labels shape {labels.shape} does not match manifest "
                f"({manifest.n}, {manifest.n_labels})"
            )
        vocab_size = len(manifest.vocab)
        for i, rep in enumerate(reports):
            if rep.size and int(rep.max()) >= vocab_size:
                raise DataError(f"record {i} has a token id outside the vocabulary")
        self.manifest = manifest
        self.signals = signals
        self.reports = reports
        self.labels = labels

    def __len__(self) -> int:
        return self.manifest.n

    @property
    def semantic_labels(self) -> np.ndarray:
        return self.labels[:, : self.manifest.k_s]

    @property
    def structural_labels(self) -> np.ndarray:
        return self.labels[:, self.manifest.k_s :]

    @property
    def max_report_len(self) -> int:
        return max((len(r) for r in self.reports), default=1)

    def record(self, i: int) -> SignalRecord:
        return SignalRecord(
            signal=self.signals[i],
            report=self.reports[i],
            semantic_labels=self.semantic_labels[i],
            structural_labels=self.structural_labels[i],
        )

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices)
        manifest = DatasetManifest(
            n=int(indices.size),
            c=self.manifest.c,
            t=self.manifest.t,
            vocab=self.manifest.vocab,
            k_s=self.manifest.k_s,
            k_m=self.manifest.k_m,
            class_descriptions=self.manifest.class_descriptions,
            generator_config=self.manifest.generator_config,
        )
        return Dataset(
            manifest,
            self.signals[indices],
            [self.reports[i] for i in indices],
            self.labels[indices],
        )


# ---------------------------------------------------------------------------
# generation


@lru_cache(maxsize=4)
def _fixed_tables(c: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed full-rank lead-mixing matrix and per-lead morphology profile."""
    rng = np.random.default_rng(_TABLE_SEED)
    mix = np.eye(c) + _MIX_STRENGTH * rng.normal(size=(c, c)) / np.sqrt(c)
    if np.linalg.matrix_rank(mix) != c:  # pragma: no cover - fixed seed is full rank
        raise RuntimeError("lead mixing matrix is singular; change _TABLE_SEED")
    profile = rng.uniform(0.5, 1.2, size=(c, 4))  # P, QRS, T, ST gain per lead
    return mix, profile


def _bump_train(t_len: int, centers: np.ndarray, offset: float, width: float, amp: float) -> np.ndarray:
    out = np.zeros(t_len)
    if amp == 0.0:
        return out
    half = 4.0 * width
    for center in centers + offset:
        lo = max(int(np.floor(center - half)), 0)
        hi = min(int(np.ceil(center + half)) + 1, t_len)
        if lo >= hi:
            continue
        grid = np.arange(lo, hi)
        out[lo:hi] += amp * np.exp(-0.5 * ((grid - center) / width) ** 2)
    return out


def _beat_centers(rng: np.random.Generator, t_len: int, irregular: bool) -> np.ndarray:
    rr0 = rng.uniform(*_RR_RANGE)
    pos = rng.uniform(0.0, rr0)
    centers = []
    # start one interval early so edge beats are partially visible
    pos -= rr0
    while pos < t_len + 40.0:
        centers.append(pos)
        step = rr0
        if irregular:
            step *= 1.0 + rng.uniform(-_RR_JITTER, _RR_JITTER)
        pos += step
    return np.asarray(centers)


def _synthesize_record(
    rng: np.random.Generator, config: GeneratorConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    k_s, k_m = config.k_s, config.k_m
    codes = (rng.random(k_s) < np.asarray(config.prevalence)).astype(np.uint8)
    factors = rng.random(k_m)
    s = np.zeros(len(SEMANTIC_PHRASES), dtype=np.uint8)
    s[:k_s] = codes

    centers = _beat_centers(rng, config.t, irregular=bool(s[0]))
    qrs_width = _QRS[1] * (_QRS_WIDEN if s[1] else 1.0)
    st_amp = _ST_BUMP[2] if s[2] else 0.0
    t_amp = -_T_WAVE[2] if s[3] else _T_WAVE[2]
    t_lo, t_hi = _T_WIDTH_SPAN
    t_width = _T_WAVE[1] * (t_lo + (t_hi - t_lo) * (factors[1] if k_m >= 2 else 0.5))

    trains = np.stack(
        [
            _bump_train(config.t, centers, _P_WAVE[0], _P_WAVE[1], _P_WAVE[2]),
            _bump_train(config.t, centers, _QRS[0], qrs_width, _QRS[2]),
            _bump_train(config.t, centers, _T_WAVE[0], t_width, t_amp),
            _bump_train(config.t, centers, _ST_BUMP[0], _ST_BUMP[1], st_amp),
        ]
    )
    mix, profile = _fixed_tables(config.c)
    signal = mix @ (profile @ trains)

    g_lo, g_hi = _CHEST_GAIN_SPAN
    chest_gain = g_lo + (g_hi - g_lo) * factors[0]
    signal[config.c // 2 :] *= chest_gain

    if config.noise_sigma > 0:
        signal = signal + rng.normal(0.0, config.noise_sigma, size=signal.shape)

    phrases = [SEMANTIC_PHRASES[k] for k in range(k_s) if codes[k]]
    words = [w for phrase in phrases for w in phrase] if phrases else ["normal"]
    report = np.asarray([VOCAB.index(w) for w in words], dtype=np.uint32)
    structural = (factors > 0.5).astype(np.uint8)
    return signal.astype(np.float32), report, codes, structural


def generate_corpus(config: GeneratorConfig, seed: int) -> Dataset:
    """Deterministically generate the paired corpus for ``seed``."""
    config = config.validate()
    signals = np.zeros((config.n, config.c, config.t), dtype=np.float32)
    reports: list[np.ndarray] = []
    labels = np.zeros((config.n, config.k_s + config.k_m), dtype=np.uint8)
    for i in range(config.n):
        rng = np.random.default_rng((int(seed), _STREAM_RECORD, i))
        signal, report, codes, structural = _synthesize_record(rng, config)
        signals[i] = signal
        reports.append(report)
        labels[i, : config.k_s] = codes
        labels[i, config.k_s :] = structural
    descriptions = [
        [VOCAB.index(w) for w in SEMANTIC_PHRASES[k]] for k in range(config.k_s)
    ]
    config_dict = asdict(config)
    config_dict["prevalence"] = list(config.prevalence)  # keep JSON-stable
    config_dict["seed"] = int(seed)
    manifest = DatasetManifest(
        n=config.n,
        c=config.c,
        t=config.t,
        vocab=list(VOCAB),
        k_s=config.k_s,
        k_m=config.k_m,
        class_descriptions=descriptions,
        generator_config=config_dict,
    )
    return Dataset(manifest, signals, reports, labels)


# ---------------------------------------------------------------------------
# on-disk layout (format_version 1)
#
#   meta.json    manifest, UTF-8 JSON
#   signals.f32  little-endian float32, row-major [n, c, t]
#   reports.bin  per record: u32 token count, then that many u32 token ids
#   labels.u8    [n, k_s + k_m] bytes, semantic columns first


def save_dataset(dataset: Dataset, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": dataset.manifest.format_version,
        "n": dataset.manifest.n,
        "c": dataset.manifest.c,
        "t": dataset.manifest.t,
        "vocab": dataset.manifest.vocab,
        "k_s": dataset.manifest.k_s,
        "k_m": dataset.manifest.k_m,
        "class_descriptions": dataset.manifest.class_descriptions,
        "generator_config": dataset.manifest.generator_config,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    (out / "signals.f32").write_bytes(
        np.ascontiguousarray(dataset.signals, dtype="<f4").tobytes()
    )
    chunks = []
    for report in dataset.reports:
        chunks.append(np.asarray([report.size], dtype="<u4").tobytes())
        chunks.append(np.ascontiguousarray(report, dtype="<u4").tobytes())
    (out / "reports.bin").write_bytes(b"".join(chunks))
    (out / "labels.u8").write_bytes(
        np.ascontiguousarray(dataset.labels, dtype=np.uint8).tobytes()
    )


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no dataset at {root}: missing meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    n, c, t = int(meta["n"]), int(meta["c"]), int(meta["t"])
    k_s, k_m = int(meta["k_s"]), int(meta["k_m"])

    raw = (root / "signals.f32").read_bytes()
    expected = 4 * n * c * t
    if len(raw) != expected:
        raise DataError(
            f"payload size mismatch in signals.f32: expected {expected} bytes, got {len(raw)}"
        )
    signals = np.frombuffer(raw, dtype="<f4").reshape(n, c, t).copy()

    raw = (root / "reports.bin").read_bytes()
    reports: list[np.ndarray] = []
    offset = 0
    for i in range(n):
        if offset + 4 > len(raw):
            raise DataError(f"payload size mismatch in reports.bin at record {i}")
        count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        if offset + 4 * count > len(raw):
            raise DataError(f"payload size mismatch in reports.bin at record {i}")
        reports.append(np.frombuffer(raw, dtype="<u4", count=count, offset=offset).copy())
        offset += 4 * count
    if offset != len(raw):
        raise DataError("payload size mismatch in reports.bin: trailing bytes")

    raw = (root / "labels.u8").read_bytes()
    if len(raw) != n * (k_s + k_m):
        raise DataError(
            f"payload size mismatch in labels.u8: expected {n * (k_s + k_m)} bytes, got {len(raw)}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(n, k_s + k_m).copy()

    manifest = DatasetManifest(
        n=n,
        c=c,
        t=t,
        vocab=list(meta["vocab"]),
        k_s=k_s,
        k_m=k_m,
        class_descriptions=[list(map(int, seq)) for seq in meta["class_descriptions"]],
        generator_config=dict(meta["generator_config"]),
    )
    return Dataset(manifest, signals, reports, labels)
