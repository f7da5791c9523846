"""Synthetic corpora with planted factor structure.

Every frame is a sum of per-factor codes plus Gaussian noise.  A
``concentrated`` factor writes its code into a few reserved dimensions; a
``diffuse`` factor is projected through a seeded dense random matrix so
each listed dimension carries only about ``strength / sqrt(len(dims))``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from phoneprobe._fileio import read_json, write_json
from phoneprobe.dataio import AlignmentTable, FeatureArchive, PhoneToken

FACTORS = ("phone", "phone_class", "gender", "language")
STYLES = ("concentrated", "diffuse")
PRESETS = ("concentrated", "diffuse", "quantization")

DEFAULT_PHONES = {
    "f": "fricative", "s": "fricative",
    "tS": "affricate", "dZ": "affricate",
    "p": "plosive", "t": "plosive",
    "l": "approximant", "r": "approximant",
    "m": "nasal", "n": "nasal",
    "an": "nasal vowel", "on": "nasal vowel",
    "w": "semi-vowel", "j": "semi-vowel",
    "a": "vowel", "i": "vowel",
}

# five phones per class, close to the size of a real inventory
LARGE_PHONES = {
    **{ph: "fricative" for ph in ("f", "s", "S", "v", "z")},
    **{ph: "affricate" for ph in ("tS", "dZ", "ts", "dz", "pf")},
    **{ph: "plosive" for ph in ("p", "t", "k", "b", "d")},
    **{ph: "approximant" for ph in ("l", "r", "R", "h", "L")},
    **{ph: "nasal" for ph in ("m", "n", "N", "J", "nj")},
    **{ph: "nasal vowel" for ph in ("an", "on", "in", "un", "en")},
    **{ph: "semi-vowel" for ph in ("w", "j", "H", "wa", "ja")},
    **{ph: "vowel" for ph in ("a", "i", "u", "e", "o")},
}


class ProfileError(ValueError):
    pass


@dataclass
class FactorSpec:
    dims: list[int]
    strength: float
    style: str = "concentrated"


@dataclass
class SynthProfile:
    n_speakers: int = 8
    n_utterances: int = 100
    dim: int = 64
    frame_rate_hz: float = 100.0
    phones: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PHONES))
    factors: dict[str, FactorSpec] = field(default_factory=dict)
    noise_sigma: float = 1.0
    seed: int = 0
    phones_per_utterance: tuple[int, int] = (8, 16)
    duration_frames: tuple[int, int] = (3, 12)
    genders: tuple[str, str] = ("female", "male")
    languages: tuple[str, str] = ("EN", "FR")

    def validate(self) -> None:
        if self.n_speakers < 1 or self.n_utterances < 1 or self.dim < 1:
            raise ProfileError("n_speakers, n_utterances and dim must be positive")
        if not self.frame_rate_hz > 0:
            raise ProfileError("frame_rate_hz must be positive")
        if not self.phones:
            raise ProfileError("empty phone inventory")
        if self.noise_sigma < 0:
            raise ProfileError("noise_sigma must be >= 0")
        lo, hi = self.phones_per_utterance
        if not 1 <= lo <= hi:
            raise ProfileError(f"bad phones_per_utterance {self.phones_per_utterance}")
        lo, hi = self.duration_frames
        if not 1 <= lo <= hi:
            raise ProfileError(f"bad duration_frames {self.duration_frames}")
        reserved: dict[int, str] = {}
        for name, spec in self.factors.items():
            if name not in FACTORS:
                raise ProfileError(f"unknown factor {name!r}; expected one of {FACTORS}")
            if spec.style not in STYLES:
                raise ProfileError(f"factor {name!r}: unknown style {spec.style!r}")
            if not spec.dims:
                raise ProfileError(f"factor {name!r}: no dims")
            if len(set(spec.dims)) != len(spec.dims):
                raise ProfileError(f"factor {name!r}: repeated dims")
            if any(d < 0 or d >= self.dim for d in spec.dims):
                raise ProfileError(f"factor {name!r}: dims outside [0, {self.dim})")
            if spec.strength < 0:
                raise ProfileError(f"factor {name!r}: negative strength")
            if spec.style == "concentrated":
                for d in spec.dims:
                    if d in reserved:
                        raise ProfileError(f"dim {d} reserved by both {reserved[d]!r} and {name!r}")
                    reserved[d] = name

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["phones_per_utterance"] = list(self.phones_per_utterance)
        out["duration_frames"] = list(self.duration_frames)
        out["genders"] = list(self.genders)
        out["languages"] = list(self.languages)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthProfile":
        obj = dict(obj)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ProfileError(f"unknown profile fields {sorted(unknown)}")
        try:
            obj["factors"] = {k: FactorSpec(**v) for k, v in obj.get("factors", {}).items()}
        except TypeError as exc:
            raise ProfileError(f"bad factor spec: {exc}") from exc
        for key in ("phones_per_utterance", "duration_frames", "genders", "languages"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "SynthProfile":
        return cls.from_json(read_json(path))

    def replace(self, **changes) -> "SynthProfile":
        return dataclasses.replace(self, **changes)


def preset(name: str, **overrides) -> SynthProfile:
    """Ready-made profiles.

    ``concentrated`` puts the language code in a single dimension, while
    ``diffuse`` spreads it thinly over all dimensions.  Phone identity,
    phone class and gender are concentrated in both.

    ``quantization`` has 40 phones, four speakers and gender as the weakest
    code, so a 50-unit codebook cannot resolve every phone x gender x
    language mode while a 200-unit one can.
    """
    dim = overrides.get("dim", 64)
    if name == "quantization":
        base = SynthProfile(
            n_speakers=4,
            dim=dim,
            phones=dict(LARGE_PHONES),
            factors={
                "phone": FactorSpec(list(range(0, 12)), 2.0),
                "phone_class": FactorSpec(list(range(12, 20)), 1.5),
                "gender": FactorSpec(list(range(20, 24)), 0.9),
                "language": FactorSpec([24], 1.1),
            },
            noise_sigma=0.8,
        )
        return base.replace(**overrides)
    factors = {
        "phone": FactorSpec(list(range(0, 12)), 2.0),
        "phone_class": FactorSpec(list(range(12, 20)), 1.5),
        "gender": FactorSpec(list(range(20, 24)), 1.0),
    }
    if name == "concentrated":
        factors["language"] = FactorSpec([24], 0.8)
    elif name == "diffuse":
        factors["language"] = FactorSpec(list(range(dim)), 0.8, "diffuse")
    else:
        raise ProfileError(f"unknown preset {name!r}")
    base = SynthProfile(dim=dim, factors=factors, noise_sigma=1.0)
    return base.replace(**overrides)


def _factor_codes(spec: FactorSpec, n_values: int, dim: int, rng) -> np.ndarray:
    """``n_values x dim`` matrix of codes, one row per factor value."""
    m = len(spec.dims)
    q = m if spec.style == "concentrated" else max(1, min(m, n_values - 1))
    Z = rng.normal(size=(n_values, q))
    if n_values > 1:
        Z -= Z.mean(axis=0)
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    Z = Z / np.where(norms > 0, norms, 1.0)
    if spec.style == "concentrated":
        local = spec.strength * Z
    else:
        proj = rng.choice([-1.0, 1.0], size=(q, m)) / np.sqrt(m)
        local = spec.strength * (Z @ proj)
    codes = np.zeros((n_values, dim))
    codes[:, spec.dims] = local
    return codes


def speaker_labels(profile: SynthProfile) -> list[tuple[str, str, str]]:
    """(speaker id, gender, language) for every speaker; gender and language are crossed."""
    out = []
    for s in range(profile.n_speakers):
        out.append((f"spk{s:03d}", profile.genders[s % 2], profile.languages[(s // 2) % 2]))
    return out


def generate(profile: SynthProfile) -> tuple[FeatureArchive, AlignmentTable]:
    profile.validate()
    phones = sorted(profile.phones)
    classes = sorted(set(profile.phones.values()))
    vocab = {
        "phone": phones,
        "phone_class": classes,
        "gender": sorted(set(profile.genders)),
        "language": sorted(set(profile.languages)),
    }
    root = np.random.SeedSequence(profile.seed)
    code_seeds = dict(zip(FACTORS, root.spawn(len(FACTORS))))
    codes = {
        name: _factor_codes(spec, len(vocab[name]), profile.dim, np.random.default_rng(code_seeds[name]))
        for name, spec in profile.factors.items()
    }
    speakers = speaker_labels(profile)
    utterances = {}
    tokens = []
    for u in range(profile.n_utterances):
        rng = np.random.default_rng([profile.seed, 1 + u])
        spk, gender, language = speakers[u % profile.n_speakers]
        utt_id = f"utt{u:05d}"
        n_ph = int(rng.integers(profile.phones_per_utterance[0], profile.phones_per_utterance[1] + 1))
        seq = rng.integers(0, len(phones), size=n_ph)
        durs = rng.integers(profile.duration_frames[0], profile.duration_frames[1] + 1, size=n_ph)
        n_frames = int(durs.sum())
        frames = rng.normal(0.0, profile.noise_sigma, size=(n_frames, profile.dim)) if profile.noise_sigma > 0 \
            else np.zeros((n_frames, profile.dim))
        start = 0
        for i, (p, d) in enumerate(zip(seq, durs)):
            phone = phones[p]
            values = {
                "phone": p,
                "phone_class": classes.index(profile.phones[phone]),
                "gender": vocab["gender"].index(gender),
                "language": vocab["language"].index(language),
            }
            for name, C in codes.items():
                frames[start:start + d] += C[values[name]]
            tokens.append(
                PhoneToken(
                    token_id=f"{utt_id}_{i:03d}",
                    utterance_id=utt_id,
                    phone=phone,
                    phone_class=profile.phones[phone],
                    start_frame=start,
                    end_frame=start + int(d),
                    speaker=spk,
                    gender=gender,
                    language=language,
                )
            )
            start += int(d)
        utterances[utt_id] = frames
    archive = FeatureArchive(utterances, profile.dim, profile.frame_rate_hz)
    return archive, AlignmentTable.from_tokens(tokens, archive)
