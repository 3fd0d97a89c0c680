"""
tagtriplet Audio Features
Deterministic audio-to-feature pipeline: resample, segment, STFT, mel filterbank,
log transform, and the flatten / band-stats summaries fed to the encoder.
"""

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import librosa
import numpy as np
from scipy.io import wavfile

from .artifacts import check_header, fmt_row, header_line, parse_floats
from .config import AudioConfig
from .errors import DataError, DurationError, FormatVersionError, ParameterError, UnknownTrackError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.size == 0:
            raise DataError("audio clip is empty")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio clip contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    values: np.ndarray  # n_mels x T
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def read_wav(path: PathLike) -> AudioClip:
    """PCM WAV (8/16/32-bit integer or float), stereo downmixed by channel average"""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported WAV sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate))


def resample(clip: AudioClip, target_rate: int = 22050) -> AudioClip:
    """Linear-interpolation resampling; identity when the rates already match"""
    if clip.sample_rate <= 0:
        raise ParameterError("sample_rate", clip.sample_rate, "> 0")
    if clip.sample_rate == target_rate:
        return clip
    n_in = len(clip.samples)
    n_out = max(1, int(round(n_in * target_rate / clip.sample_rate)))
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    samples = np.interp(positions, np.arange(n_in), clip.samples)
    return AudioClip(samples=samples, sample_rate=target_rate)


def segment(clip: AudioClip, offset: float = 3.0, length: float = 6.0) -> AudioClip:
    """Cut `length` seconds starting `offset` seconds in (skips fade-ins)"""
    start = int(round(offset * clip.sample_rate))
    count = int(round(length * clip.sample_rate))
    if len(clip.samples) < start + count:
        raise DurationError(required=offset + length, actual=clip.duration)
    return AudioClip(samples=clip.samples[start:start + count].copy(), sample_rate=clip.sample_rate)


def stft(clip: AudioClip, window: int = 2048, hop: int = 1024, center_pad: bool = True) -> np.ndarray:
    """
    Magnitude STFT, frames x (window/2 + 1), periodic Hann window. With center
    padding (reflect, window/2 per side) there are floor(N / hop) + 1 frames.
    """
    y = np.ascontiguousarray(clip.samples, dtype=np.float64)
    spec = librosa.stft(y, n_fft=window, hop_length=hop, window="hann",
                        center=center_pad, pad_mode="reflect")
    return np.abs(spec).T


def mel_filterbank(
    n_mels: int = 80,
    f_min: float = 16.0,
    f_max: float = 11000.0,
    n_fft: int = 2048,
    rate: int = 22050,
) -> np.ndarray:
    """Triangular filters on the mel scale 2595 * log10(1 + f / 700), unnormalized peaks"""
    if n_mels < 1:
        raise ParameterError("n_mels", n_mels, ">= 1")
    if not 0 <= f_min < f_max <= rate / 2:
        raise ParameterError("f_max", f_max, f"f_min ({f_min}) < f_max <= rate / 2 ({rate / 2})")
    return librosa.filters.mel(sr=rate, n_fft=n_fft, n_mels=n_mels, fmin=f_min, fmax=f_max,
                               htk=True, norm=None, dtype=np.float64)


def mel_spectrogram(clip: AudioClip, config: AudioConfig = None) -> MelSpectrogram:
    """log(1 + mel filterbank . power spectrogram), n_mels x frames"""
    cfg = config or AudioConfig()
    power = stft(clip, window=cfg.n_fft, hop=cfg.hop) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.f_min, cfg.f_max, cfg.n_fft, clip.sample_rate)
    values = np.log1p(fb @ power.T)
    params = {
        "sample_rate": clip.sample_rate, "n_fft": cfg.n_fft, "hop": cfg.hop,
        "n_mels": cfg.n_mels, "f_min": cfg.f_min, "f_max": cfg.f_max,
    }
    return MelSpectrogram(values=values, params=params)


def features_from_mel(spec: MelSpectrogram, mode: str = "band-stats") -> np.ndarray:
    if mode == "flatten":
        return spec.values.ravel().copy()
    if mode == "band-stats":
        return np.concatenate([spec.values.mean(axis=1), spec.values.std(axis=1)])
    raise ParameterError("mode", mode, "flatten | band-stats")


def extract_track(path: PathLike, config: AudioConfig = None) -> Tuple[np.ndarray, MelSpectrogram]:
    """read -> resample -> segment -> mel spectrogram -> feature vector"""
    cfg = config or AudioConfig()
    clip = resample(read_wav(path), cfg.sample_rate)
    clip = segment(clip, cfg.offset, cfg.duration)
    spec = mel_spectrogram(clip, cfg)
    return features_from_mel(spec, cfg.feature_mode), spec


# --- feature files ---

def feature_filename(track_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", track_id)
    if safe != track_id:
        safe += "-" + hashlib.sha1(track_id.encode("utf-8")).hexdigest()[:8]
    return safe + ".feat"


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    track_id: str
    values: np.ndarray
    mode: str
    params: Dict[str, str]


def write_features(path: PathLike, track_id: str, values: np.ndarray, mode: str, params: Dict[str, object]):
    param_text = ";".join(f"{k}={v}" for k, v in sorted(params.items()))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("features"))
        f.write(f"track_id\t{track_id}\n")
        f.write(f"shape\t{len(values)}\n")
        f.write(f"mode\t{mode}\n")
        f.write(f"params\t{param_text}\n")
        f.write("values\t" + fmt_row(values) + "\n")


def read_features(path: PathLike) -> FeatureRecord:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    check_header(lines[0], "features", path)
    fields_ = {}
    for line in lines[1:6]:
        key, _, value = line.partition("\t")
        fields_[key] = value
    try:
        values = parse_floats(fields_["values"])
        if len(values) != int(fields_["shape"]):
            raise ValueError(f"shape {fields_['shape']} but {len(values)} values")
        params = dict(p.split("=", 1) for p in fields_["params"].split(";") if p)
    except (KeyError, ValueError) as e:
        raise FormatVersionError(f"{path}: corrupt feature file ({e})")
    return FeatureRecord(fields_["track_id"], values, fields_["mode"], params)


def write_feature_manifest(path: PathLike, entries: Sequence[Tuple[str, str]]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_line("feature-manifest"))
        f.write("track_id\tpath\n")
        for track_id, rel in sorted(entries):
            f.write(f"{track_id}\t{rel}\n")


def read_feature_manifest(path: PathLike) -> Dict[str, Path]:
    """track_id -> feature file path, relative paths resolved against the manifest's directory"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [l.rstrip("\r\n") for l in f]
    check_header(lines[0], "feature-manifest", path)
    out = {}
    for line in lines[2:]:
        if not line or line.startswith("#"):
            continue
        track_id, _, rel = line.partition("\t")
        target = Path(rel)
        out[track_id] = target if target.is_absolute() else path.parent / target
    return out


def load_feature_matrix(manifest: Dict[str, Path], track_ids: Sequence[str]) -> np.ndarray:
    """Stack the feature vectors of `track_ids` in order"""
    rows = []
    for t in track_ids:
        if t not in manifest:
            raise UnknownTrackError(t)
        rows.append(read_features(manifest[t]).values)
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DataError(f"feature vectors differ in width: {sorted(widths)}")
    return np.vstack(rows)


def read_wav_manifest(path: PathLike) -> List[Tuple[str, Path]]:
    """Plain `track_id, wav path` TSV (no header line required)"""
    path = Path(path)
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DataError(f"{path}:{line_no}: expected 'track_id<TAB>path'")
            wav = Path(cols[1])
            entries.append((cols[0], wav if wav.is_absolute() else path.parent / wav))
    return entries
