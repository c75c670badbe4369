"""Mesh <-> token sequence conversion and generated-mesh validation.

Grammar (ids 0..B-1 are coordinate bins, the top four ids are specials)::

    seq   := BOS [face (FACE_SEP face)*] EOS_STOP
    face  := z y x  z y x  z y x        (full triangle, 9 tokens)
           | z y x                      (shares an edge with the previous face)

Each triangle is rotated so its lexicographically smallest (z, y, x)
vertex comes first, keeping orientation, and triangles are sorted by their
vertex tuples. A triangle whose first two vertices equal the previous
triangle's first and last vertices is emitted as its third vertex only;
fans of polygon triangles compress this way.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MalformedSequence, NaNVertex, NonTriangulated, OutOfRangeCoordinate
from .geometry import PolyMesh

TOKEN_MAGIC = b"LCDT"


@dataclass(frozen=True)
class Vocabulary:
    coord_bins: int = 128

    def __post_init__(self):
        b = self.coord_bins
        if b < 2 or b & (b - 1):
            raise ValueError("coord_bins must be a power of two")

    @property
    def bos(self) -> int:
        return self.coord_bins

    @property
    def eos(self) -> int:
        return self.coord_bins + 1

    @property
    def sep(self) -> int:
        return self.coord_bins + 2

    @property
    def pad(self) -> int:
        return self.coord_bins + 3

    @property
    def size(self) -> int:
        return self.coord_bins + 4

    def quantize(self, coords: np.ndarray) -> np.ndarray:
        b = self.coord_bins
        return np.clip(np.floor((np.asarray(coords) + 1.0) * b / 2.0), 0, b - 1).astype(np.int64)

    def dequantize(self, bins: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(bins, dtype=np.float64) + 0.5) / self.coord_bins - 1.0


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    kind: str = "mesh"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.kind not in ("prompt", "mesh", "combined"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.tokens)

    def array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)


@dataclass
class DecodedMesh:
    mesh: PolyMesh
    complete: bool
    dropped_faces: int = 0


@dataclass
class ValidationReport:
    success: bool
    reasons: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"success": self.success, "reasons": list(self.reasons)}


def _canonical_faces(mesh: PolyMesh, vocab: Vocabulary) -> list[tuple]:
    if not mesh.is_triangulated():
        raise NonTriangulated("tokenisation needs a triangle mesh")
    v = mesh.vertices
    if np.isnan(v).any():
        raise NaNVertex("mesh has NaN vertices")
    if not np.all(np.isfinite(v)) or (len(v) and np.abs(v).max() > 1.0):
        raise OutOfRangeCoordinate("vertices must lie in [-1, 1]^3")
    q = vocab.quantize(v)[:, ::-1]  # (z, y, x)
    faces = []
    for f in mesh.faces:
        tri = [tuple(int(c) for c in q[i]) for i in f]
        start = min(range(3), key=lambda i: tri[i])
        faces.append(tuple(tri[start:] + tri[:start]))
    faces.sort()
    return faces


def tokenize_mesh(mesh: PolyMesh, vocab: Vocabulary | None = None) -> TokenSequence:
    vocab = vocab or Vocabulary()
    out = [vocab.bos]
    prev = None
    for face in _canonical_faces(mesh, vocab):
        if prev is not None:
            out.append(vocab.sep)
        if prev is not None and face[0] == prev[0] and face[1] == prev[2]:
            out.extend(face[2])
        else:
            for vert in face:
                out.extend(vert)
        prev = face
    out.append(vocab.eos)
    return TokenSequence(out, "mesh")


def detokenize_mesh(seq: TokenSequence, vocab: Vocabulary | None = None, strict: bool = True) -> DecodedMesh:
    """Invert ``tokenize_mesh``; a sequence cut short loses only its last face.

    A run of coordinates not closed by FACE_SEP or EOS_STOP is kept only if
    it holds a whole 9-token triangle. With ``strict=False`` (for model
    output) grammar errors do not raise: a misplaced special token ends the
    parse and runs of the wrong length are counted as dropped faces.
    """
    vocab = vocab or Vocabulary()
    toks = list(seq.tokens)
    if not toks or toks[0] != vocab.bos:
        raise MalformedSequence("sequence must start with BOS")
    runs: list[list[int]] = []
    cur: list[int] = []
    complete = False
    for pos, t in enumerate(toks[1:], start=1):
        if t < vocab.coord_bins:
            cur.append(t)
        elif t in (vocab.sep, vocab.eos):
            if t == vocab.sep or cur or runs:
                runs.append(cur)
            cur = []
            if t == vocab.eos:
                complete = True
                if pos != len(toks) - 1 and strict:
                    raise MalformedSequence("tokens after EOS_STOP")
                break
        elif strict:
            raise MalformedSequence(f"unexpected special token {t} at position {pos}")
        else:
            break
    dropped = 0
    if not complete and cur:
        if len(cur) == 9:
            runs.append(cur)
        else:
            dropped = 1
    verts: dict[tuple, int] = {}
    faces = []
    prev = None
    for i, run in enumerate(runs):
        if len(run) == 9:
            tri = [tuple(run[3 * k : 3 * k + 3]) for k in range(3)]
        elif len(run) == 3 and prev is not None:
            tri = [prev[0], prev[2], tuple(run)]
        elif strict:
            raise MalformedSequence(f"face {i} has {len(run)} coordinate tokens")
        else:
            dropped += 1
            prev = None
            continue
        faces.append([verts.setdefault(vtx, len(verts)) for vtx in tri])
        prev = tri
    zyx = np.asarray(list(verts), dtype=np.int64).reshape(-1, 3)
    coords = vocab.dequantize(zyx[:, ::-1])
    return DecodedMesh(PolyMesh(coords, faces), complete, dropped)


def validate_generated(seq: TokenSequence, mesh: PolyMesh, vocab: Vocabulary | None = None) -> ValidationReport:
    vocab = vocab or Vocabulary()
    reasons = []
    if vocab.eos not in seq.tokens:
        reasons.append("NoStopToken")
    v = mesh.vertices
    for f in mesh.faces:
        idx = [i for i in f if 0 <= i < len(v)]
        if len(idx) < len(f) or np.isnan(v[idx]).any():
            reasons.append("NaNFace")
            break
    return ValidationReport(not reasons, reasons)


def sequence_length_bounds(n_faces: int) -> tuple[int, int]:
    if n_faces == 0:
        return 2, 2
    return 4 * n_faces + 1, 10 * n_faces + 2


def save_tokens(path, seq: TokenSequence) -> None:
    arr = seq.array()
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC + struct.pack("<I", len(arr)))
        fh.write(arr.astype("<u4").tobytes())


def load_tokens(path, kind: str = "mesh") -> TokenSequence:
    raw = Path(path).read_bytes()
    if raw[:4] != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad token magic")
    (n,) = struct.unpack("<I", raw[4:8])
    return TokenSequence(np.frombuffer(raw, dtype="<u4", count=n, offset=8).tolist(), kind)


def save_tokens_text(path, seq: TokenSequence) -> None:
    Path(path).write_text("".join(f"{t}\n" for t in seq.tokens))


def load_tokens_text(path, kind: str = "mesh") -> TokenSequence:
    return TokenSequence([int(x) for x in Path(path).read_text().split()], kind)
