"""Deterministic synthetic long-content sessions.

The vocabulary is laid out in three roles.  Pair members come first (token
``2i`` and ``2i+1`` form confusable pair i: their feature prototypes differ by
a small offset epsilon, well below the rendering noise, so acoustics alone
cannot tell them apart).  Each member has a unique *anchor* token (member m is
anchored by ``2*n_pairs + m``); the remaining ids are unambiguous fillers.

A session picks one true member per pair.  Whenever an utterance carries a
*bare* occurrence of a true member (no anchor next to it), some utterance
within the previous ``n_his`` generated utterances contains the introduction
bigram [anchor, member].  The introduction is locally decodable (the anchor
predicts its member), so cross-utterance context is informative by
construction while the bare occurrence itself is at acoustic chance.

Utterance indices may skip numbers (``gap_drop_prob``) to exercise gap
handling in history assembly; the anchor window always counts generated
utterances, not index distance.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "Codebook",
    "GeneratorConfig",
    "Utterance",
    "Session",
    "Dataset",
    "DatasetError",
    "build_codebook",
    "generate_session",
    "generate_dataset",
    "generate_text_corpus",
    "render_features",
    "sample_nhis_train",
    "confusable_positions",
    "save_dataset",
    "load_dataset",
]


class DatasetError(ValueError):
    pass


@dataclass
class Codebook:
    """Per-token feature prototypes with planted confusable pairs."""

    prototypes: np.ndarray  # (U, d_feat)
    confusable_pairs: tuple[tuple[int, int], ...]
    epsilon: float
    delta_min: float

    @property
    def vocab_size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def n_pairs(self) -> int:
        return len(self.confusable_pairs)

    def pair_members(self) -> set[int]:
        return {t for pair in self.confusable_pairs for t in pair}

    def partner(self, token: int) -> int:
        return token + 1 if token % 2 == 0 else token - 1


def anchor_of(member: int, n_pairs: int) -> int:
    """Unique anchor token id for a pair member."""
    return 2 * n_pairs + member


def build_codebook(
    vocab_size: int,
    d_feat: int,
    n_pairs: int,
    epsilon: float,
    delta_min: float,
    seed: int,
    max_retries: int = 2000,
) -> Codebook:
    """Rejection-sample prototypes until spacing constraints hold.

    All prototypes except pair partners keep pairwise distance >= delta_min;
    each partner sits exactly epsilon away from its member.  Bases are kept
    delta_min + 2*epsilon apart so the planted offsets cannot violate the
    floor.
    """
    if vocab_size < 2 * n_pairs + 2:
        raise DatasetError(f"need vocab_size >= {2 * n_pairs + 2} for {n_pairs} pairs")
    if epsilon >= delta_min:
        raise DatasetError(f"epsilon {epsilon} must be below delta_min {delta_min}")
    rng = Rng(seed).child("codebook")
    n_bases = vocab_size - n_pairs
    floor = delta_min + 2.0 * epsilon
    bases: list[np.ndarray] = []
    retries = 0
    while len(bases) < n_bases:
        cand = rng.uniform(-1.0, 1.0, d_feat)
        if all(np.linalg.norm(cand - b) >= floor for b in bases):
            bases.append(cand)
        else:
            retries += 1
            if retries > max_retries:
                raise DatasetError(
                    f"could not place {n_bases} prototypes at spacing {floor:.3f} "
                    f"after {max_retries} retries; increase d_feat or lower delta_min"
                )
    prototypes = np.zeros((vocab_size, d_feat))
    # bases fill the even pair slots first, then everything past the pair block
    base_iter = iter(bases)
    for i in range(n_pairs):
        prototypes[2 * i] = next(base_iter)
    for t in range(2 * n_pairs, vocab_size):
        prototypes[t] = next(base_iter)
    pairs = []
    for i in range(n_pairs):
        direction = rng.normal(size=d_feat)
        direction /= np.linalg.norm(direction)
        prototypes[2 * i + 1] = prototypes[2 * i] + epsilon * direction
        pairs.append((2 * i, 2 * i + 1))
    return Codebook(prototypes, tuple(pairs), epsilon, delta_min)


@dataclass
class GeneratorConfig:
    vocab_size: int = 50
    d_feat: int = 16
    n_pairs: int = 4
    epsilon: float = 0.1
    delta_min: float = 1.2
    sigma: float = 0.35
    frames_per_token: int = 4
    n_sessions: int = 60
    n_utterances: int = 6
    utt_len_min: int = 4
    utt_len_max: int = 8
    confusable_rate: float = 0.7
    gap_drop_prob: float = 0.1
    n_his: int = 2
    intro_prev_prob: float = 0.7  # introduction one utterance back (else two)
    train_frac: float = 0.7
    dev_frac: float = 0.15

    def __post_init__(self):
        if self.n_his < 1:
            raise DatasetError("the anchor rule needs n_his >= 1")
        if self.vocab_size < 4 * self.n_pairs + 1:
            raise DatasetError(
                f"vocab_size {self.vocab_size} too small for {self.n_pairs} pairs "
                f"with anchors plus at least one filler"
            )
        if self.frames_per_token < 4:
            raise DatasetError("frames_per_token must be >= the subsampling rate (4)")
        if self.utt_len_min < 2 or self.utt_len_max < self.utt_len_min:
            raise DatasetError("invalid utterance length range")

    @property
    def filler_start(self) -> int:
        return 4 * self.n_pairs

    def roles(self) -> dict[str, range]:
        return {
            "members": range(0, 2 * self.n_pairs),
            "anchors": range(2 * self.n_pairs, 4 * self.n_pairs),
            "fillers": range(self.filler_start, self.vocab_size),
        }


@dataclass
class Utterance:
    session_id: str
    utterance_index: int
    tokens: tuple[int, ...]
    features: Optional[np.ndarray]  # (T_in, d_feat); None in text-only corpora
    seed_lineage: str = ""

    @property
    def n_frames(self) -> int:
        return 0 if self.features is None else self.features.shape[0]


@dataclass
class Session:
    session_id: str
    utterances: list[Utterance]

    def __iter__(self):
        return iter(self.utterances)


@dataclass
class Dataset:
    config: GeneratorConfig
    seed: int
    sessions: list[Session]
    splits: dict[str, str]  # session_id -> train|dev|test
    codebook: Codebook = None

    def split_sessions(self, split: str) -> list[Session]:
        return [s for s in self.sessions if self.splits[s.session_id] == split]


def render_features(
    tokens: Sequence[int], codebook: Codebook, frames_per_token: int, sigma: float, rng: Rng
) -> np.ndarray:
    """Each token emits frames_per_token prototype+noise frames."""
    if not tokens:
        raise DatasetError("cannot render an empty token sequence")
    proto = codebook.prototypes[np.asarray(tokens, dtype=np.int64)]
    frames = np.repeat(proto, frames_per_token, axis=0)
    if sigma > 0:
        frames = frames + rng.normal(scale=sigma, size=frames.shape)
    return frames


def sample_nhis_train(n_his: int, rng: Rng) -> int:
    """Uniform draw from {0, ..., n_his}: the history length used for one step."""
    if n_his < 0:
        raise DatasetError("n_his must be >= 0")
    return int(rng.integers(0, n_his + 1))


def _sample_filler(cfg: GeneratorConfig, rng: Rng, avoid: Optional[int]) -> int:
    fillers = cfg.roles()["fillers"]
    while True:
        tok = int(rng.integers(fillers.start, fillers.stop))
        if tok != avoid:
            return tok


def generate_session(
    cfg: GeneratorConfig,
    codebook: Codebook,
    seed: int,
    session_id: str,
    render: bool = True,
) -> Session:
    """One session of utterances satisfying the anchor rule.

    Bare confusable occurrences are scheduled from the second utterance on;
    the introduction bigram is injected into a preceding utterance at distance
    1 or 2 (never beyond ``n_his``), counted over generated utterances.
    """
    rng = Rng(seed)
    r_plan = rng.child("plan")
    true_member = {
        i: (2 * i if r_plan.random() < 0.5 else 2 * i + 1) for i in range(cfg.n_pairs)
    }
    drafts: list[list[int]] = []
    for _ in range(cfg.n_utterances):
        length = int(r_plan.integers(cfg.utt_len_min, cfg.utt_len_max + 1))
        toks: list[int] = []
        for _ in range(length):
            toks.append(_sample_filler(cfg, r_plan, toks[-1] if toks else None))
        drafts.append(toks)

    reserved = cfg.filler_start  # ids below this are planted content, never clobbered

    def inject_intro(utt: list[int], member: int) -> None:
        anchor = anchor_of(member, cfg.n_pairs)
        for j in range(len(utt) - 1):
            if utt[j] == anchor and utt[j + 1] == member:
                return  # already introduced here
        for _ in range(30):
            slot = int(r_plan.integers(0, len(utt) - 1))
            if utt[slot] < reserved or utt[slot + 1] < reserved:
                continue
            before = utt[slot - 1] if slot > 0 else None
            after = utt[slot + 2] if slot + 2 < len(utt) else None
            if before == anchor or after == member:
                continue
            utt[slot] = anchor
            utt[slot + 1] = member
            return
        if utt[-1] == anchor:
            utt.append(member)
        else:
            utt.extend([anchor, member])

    def inject_bare(utt: list[int], member: int) -> None:
        anchor = anchor_of(member, cfg.n_pairs)
        for _ in range(30):
            slot = int(r_plan.integers(0, len(utt)))
            if slot < len(utt) and utt[slot] < reserved:
                continue
            before = utt[slot - 1] if slot > 0 else None
            after = utt[slot + 1] if slot + 1 < len(utt) else None
            if before in (anchor, member) or after == member:
                continue
            utt[slot] = member
            return
        if utt[-1] in (anchor, member):
            utt.append(_sample_filler(cfg, r_plan, utt[-1]))
        utt.append(member)

    for i in range(1, cfg.n_utterances):
        if r_plan.random() >= cfg.confusable_rate:
            continue
        pair = int(r_plan.integers(0, cfg.n_pairs))
        member = true_member[pair]
        max_back = min(i, cfg.n_his, 2)
        back = 1 if max_back == 1 or r_plan.random() < cfg.intro_prev_prob else 2
        inject_intro(drafts[i - back], member)
        inject_bare(drafts[i], member)

    for toks in drafts:  # repair any residual adjacent repeat (CTC needs none)
        for j in range(1, len(toks)):
            if toks[j] == toks[j - 1] and toks[j] >= reserved:
                toks[j] = _sample_filler(cfg, r_plan, toks[j - 1])

    utterances = []
    index = 0
    for k, toks in enumerate(drafts):
        index += 1
        while r_plan.random() < cfg.gap_drop_prob:
            index += 1
        lineage = f"seed:{seed}/utt:{k}"
        feats = None
        if render:
            feats = render_features(
                toks, codebook, cfg.frames_per_token, cfg.sigma, rng.child(f"render{k}")
            )
        utterances.append(Utterance(session_id, index, tuple(toks), feats, lineage))
    return Session(session_id, utterances)


def generate_dataset(cfg: GeneratorConfig, seed: int) -> Dataset:
    codebook = build_codebook(
        cfg.vocab_size, cfg.d_feat, cfg.n_pairs, cfg.epsilon, cfg.delta_min, seed
    )
    root = Rng(seed)
    sessions = []
    splits: dict[str, str] = {}
    n_train = round(cfg.n_sessions * cfg.train_frac)
    n_dev = round(cfg.n_sessions * cfg.dev_frac)
    for k in range(cfg.n_sessions):
        sid = f"S{k:04d}"
        sess = generate_session(cfg, codebook, root.child(f"session{k}").seed, sid)
        sessions.append(sess)
        splits[sid] = "train" if k < n_train else ("dev" if k < n_train + n_dev else "test")
    return Dataset(cfg, seed, sessions, splits, codebook)


def generate_text_corpus(cfg: GeneratorConfig, seed: int, n_sessions: int) -> list[Session]:
    """Token-only sessions from the same process (vocabulary-predictor pre-training).

    Features are omitted; the session structure is kept so pre-training can
    expose the predictor to history transcripts exactly as joint training
    will.
    """
    codebook = build_codebook(
        cfg.vocab_size, cfg.d_feat, cfg.n_pairs, cfg.epsilon, cfg.delta_min, seed
    )
    root = Rng(seed).child("text-pool")
    return [
        generate_session(cfg, codebook, root.child(f"session{k}").seed, f"T{k:04d}", render=False)
        for k in range(n_sessions)
    ]


def confusable_positions(tokens: Sequence[int], n_pairs: int) -> list[int]:
    """Positions of bare pair-member occurrences (no anchor immediately before)."""
    out = []
    for j, tok in enumerate(tokens):
        if tok < 2 * n_pairs:
            if j == 0 or tokens[j - 1] != anchor_of(tok, n_pairs):
                out.append(j)
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_FORMAT_VERSION = 1


def _encode_features(feats: Optional[np.ndarray]) -> Optional[str]:
    if feats is None:
        return None
    return base64.b64encode(feats.astype("<f4").tobytes()).decode("ascii")


def _decode_features(blob: Optional[str], n_frames: int, d_feat: int) -> Optional[np.ndarray]:
    if blob is None:
        return None
    raw = base64.b64decode(blob.encode("ascii"))
    expected = n_frames * d_feat * 4
    if len(raw) != expected:
        raise DatasetError(f"feature payload has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(n_frames, d_feat).astype(np.float64)


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for sess in dataset.sessions:
        for utt in sess.utterances:
            record = {
                "session_id": utt.session_id,
                "utterance_index": utt.utterance_index,
                "tokens": list(utt.tokens),
                "n_frames": utt.n_frames,
                "d_feat": dataset.config.d_feat,
                "features_b64": _encode_features(utt.features),
                "seed_lineage": utt.seed_lineage,
            }
            lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    (out / "data.jsonl").write_bytes(payload)
    manifest = {
        "version": _FORMAT_VERSION,
        "seed": dataset.seed,
        "generator_config": asdict(dataset.config),
        "splits": dataset.splits,
        "n_utterances": len(lines),
        "checksum_sha256": hashlib.sha256(payload).hexdigest(),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    data_path = root / "data.jsonl"
    if not manifest_path.exists() or not data_path.exists():
        raise DatasetError(f"{in_dir}: missing manifest.json or data.jsonl")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != _FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')}")
    payload = data_path.read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["checksum_sha256"]:
        raise DatasetError("dataset checksum mismatch; file is corrupt or truncated")
    cfg = GeneratorConfig(**manifest["generator_config"])
    sessions: dict[str, Session] = {}
    lines = payload.decode("utf-8").splitlines()
    if len(lines) != manifest["n_utterances"]:
        raise DatasetError(
            f"dataset truncated: {len(lines)} records, manifest says {manifest['n_utterances']}"
        )
    for line in lines:
        rec = json.loads(line)
        utt = Utterance(
            rec["session_id"],
            int(rec["utterance_index"]),
            tuple(rec["tokens"]),
            _decode_features(rec["features_b64"], rec["n_frames"], rec["d_feat"]),
            rec.get("seed_lineage", ""),
        )
        sessions.setdefault(utt.session_id, Session(utt.session_id, [])).utterances.append(utt)
    ordered = [sessions[sid] for sid in sorted(sessions)]
    codebook = build_codebook(
        cfg.vocab_size, cfg.d_feat, cfg.n_pairs, cfg.epsilon, cfg.delta_min, manifest["seed"]
    )
    return Dataset(cfg, manifest["seed"], ordered, dict(manifest["splits"]), codebook)
