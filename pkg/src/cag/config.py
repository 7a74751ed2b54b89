"""Run configuration: model dimensions, inference knobs, training recipe."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

VARIANTS = ("cag", "dualq")
ABLATIONS = ("no_infer", "no_u", "no_q_att", "no_g_att")

# token truncation lengths: caption / question / answer
MAX_CAPTION_TOKENS = 40
MAX_QUESTION_TOKENS = 20
MAX_ANSWER_TOKENS = 20


@dataclass
class RunConfig:
    # model dimensions
    d: int = 512
    d_w: int = 300
    d_v: int = 16
    # graph inference
    k_neighbors: int = 8
    steps: int = 3
    variant: str = "cag"
    ablations: list[str] = field(default_factory=list)
    # training recipe
    lr: float = 4e-4
    epochs: int = 20
    dropout: float = 0.3
    seed: int = 1
    vocab_min_count: int = 1
    accum_rounds: int = 1
    # paths (resolved by the CLI; recorded so eval can find the corpus)
    corpus_dir: str = ""
    out_dir: str = ""

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ValueError(f"unknown ablation {a!r}; expected among {ABLATIONS}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout ratio must be in [0, 1), got {self.dropout}")
        for name in ("d", "d_w", "d_v", "k_neighbors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def effective_steps(self) -> int:
        """Inference step count; the no-op-inference ablation forces zero steps."""
        return 0 if "no_infer" in self.ablations else self.steps

    def with_ablations(self, extra: list[str]) -> "RunConfig":
        merged = sorted(set(self.ablations) | set(extra))
        return dataclasses.replace(self, ablations=merged)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def tiny_config(**overrides) -> RunConfig:
    """Small dimensions for fast exact tests and gradient checks."""
    base = dict(d=8, d_w=6, d_v=7, k_neighbors=2, steps=2, dropout=0.0,
                lr=4e-4, epochs=1, seed=1)
    base.update(overrides)
    return RunConfig(**base)
