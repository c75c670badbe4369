import numpy as np
import pytest
from hypothesis import given, strategies as st

from buildabs.errors import MalformedSequence, NaNVertex, NonTriangulated, OutOfRangeCoordinate
from buildabs.geometry import PolyMesh, triangulate_fan
from buildabs.tokenizer import (
    TokenSequence,
    Vocabulary,
    detokenize_mesh,
    load_tokens,
    load_tokens_text,
    save_tokens,
    save_tokens_text,
    sequence_length_bounds,
    tokenize_mesh,
    validate_generated,
)
from buildabs.toy import cube, toy_buildings

V = Vocabulary(128)


def centre(bins):
    return V.dequantize(np.asarray(bins))


@st.composite
def tri_meshes(draw, max_faces=25):
    """Triangle meshes on distinct bin centres (so no two vertices merge)."""
    nv = draw(st.integers(3, 20))
    bins = draw(st.lists(st.tuples(*[st.integers(0, 127)] * 3), min_size=nv, max_size=nv, unique=True))
    nf = draw(st.integers(0, max_faces))
    faces = draw(
        st.lists(st.lists(st.integers(0, nv - 1), min_size=3, max_size=3, unique=True), min_size=nf, max_size=nf)
    )
    return PolyMesh(centre(bins), [tuple(f) for f in faces])


def canonical(mesh: PolyMesh) -> list:
    """Faces as vertex-coordinate cycles rotated to their smallest corner."""
    out = []
    for f in mesh.faces:
        tri = [tuple(np.round(mesh.vertices[i], 9)) for i in f]
        k = tri.index(min(tri))
        out.append(tuple(tri[k:] + tri[:k]))
    return sorted(out)


def test_vocabulary_layout():
    assert (V.bos, V.eos, V.sep, V.pad, V.size) == (128, 129, 130, 131, 132)
    with pytest.raises(ValueError):
        Vocabulary(100)


def test_single_triangle_by_hand():
    # bins are (x, y, z); tokens are emitted z, y, x
    mesh = PolyMesh(centre([[10, 20, 30], [40, 50, 60], [5, 6, 7]]), [(0, 1, 2)])
    seq = tokenize_mesh(mesh, V)
    assert seq.tokens == (128, 7, 6, 5, 30, 20, 10, 60, 50, 40, 129)


def test_empty_mesh():
    seq = tokenize_mesh(PolyMesh(np.zeros((0, 3)), []), V)
    assert seq.tokens == (V.bos, V.eos)
    dec = detokenize_mesh(seq, V)
    assert dec.mesh.n_faces == 0 and dec.complete


def test_shared_edge_compression():
    # in (z, y, x) order the second face starts with the first face's edge (v0, v2)
    a, b, c, d = [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]
    mesh = PolyMesh(centre([a, b, c, d]), [(0, 1, 2), (0, 2, 3)])
    seq = tokenize_mesh(mesh, V)
    assert len(seq) == 1 + 9 + 1 + 3 + 1
    assert canonical(detokenize_mesh(seq, V).mesh) == canonical(mesh)


def test_errors():
    with pytest.raises(NonTriangulated):
        tokenize_mesh(cube(), V)
    with pytest.raises(OutOfRangeCoordinate):
        tokenize_mesh(PolyMesh([[0, 0, 0], [2, 0, 0], [0, 1, 0]], [(0, 1, 2)]), V)
    with pytest.raises(NaNVertex):
        tokenize_mesh(PolyMesh([[0, 0, 0], [np.nan, 0, 0], [0, 1, 0]], [(0, 1, 2)]), V)
    with pytest.raises(MalformedSequence):
        detokenize_mesh(TokenSequence([1, 2, 3]), V)
    with pytest.raises(MalformedSequence):
        detokenize_mesh(TokenSequence([V.bos, 1, 2, V.sep, 3, 4, V.eos]), V)


def test_cube_round_trip():
    tri, _ = triangulate_fan(cube())
    tri = PolyMesh(tri.vertices / 2.0 - [0, 0, 0.5], tri.faces)
    dec = detokenize_mesh(tokenize_mesh(tri, V), V)
    assert dec.mesh.n_faces == 12 and dec.complete
    assert np.abs(np.sort(dec.mesh.vertices, axis=0) - np.sort(tri.vertices[:8], axis=0)).max() <= 1 / 128


@given(tri_meshes())
def test_round_trip_connectivity(mesh):
    seq = tokenize_mesh(mesh, V)
    dec = detokenize_mesh(seq, V)
    assert dec.complete and dec.dropped_faces == 0
    assert canonical(dec.mesh) == canonical(mesh)
    lo, hi = sequence_length_bounds(mesh.n_faces)
    assert lo <= len(seq) <= hi


@given(tri_meshes(), st.randoms(use_true_random=False))
def test_face_order_canonical(mesh, rnd):
    faces = list(mesh.faces)
    rnd.shuffle(faces)
    assert tokenize_mesh(PolyMesh(mesh.vertices, faces), V) == tokenize_mesh(mesh, V)


@given(st.integers(0, 1000))
def test_vertex_error_within_a_bin(seed):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-1, 1, (6, 3))
    mesh = PolyMesh(verts, [(0, 1, 2), (3, 4, 5)])
    dec = detokenize_mesh(tokenize_mesh(mesh, V), V).mesh
    err = np.abs(dec.vertices[:, None, :] - verts[None]).max(axis=2).min(axis=1)
    assert err.max() <= 1 / 128


def test_truncated_sequence_drops_last_face():
    mesh, _ = triangulate_fan(toy_buildings(1, seed=2)[0][1])
    seq = tokenize_mesh(mesh, V)
    cut = TokenSequence(seq.tokens[:-3])
    dec = detokenize_mesh(cut, V)
    assert not dec.complete and dec.dropped_faces == 1
    assert dec.mesh.n_faces == mesh.n_faces - 1


def test_validation_reasons():
    mesh, _ = triangulate_fan(toy_buildings(1, seed=2)[0][1])
    seq = tokenize_mesh(mesh, V)
    assert validate_generated(seq, detokenize_mesh(seq, V).mesh, V).success
    cut = TokenSequence(seq.tokens[:5])
    rep = validate_generated(cut, detokenize_mesh(cut, V).mesh, V)
    assert not rep.success and rep.reasons == ["NoStopToken"]
    bad = PolyMesh(np.array([[0, 0, 0], [np.nan, 0, 0], [0, 1, 0]]), [(0, 1, 2)])
    rep = validate_generated(seq, bad, V)
    assert not rep.success and rep.reasons == ["NaNFace"]


def test_lenient_parse_of_model_output():
    toks = [V.bos, 1, 2, 3, 4, 5, 6, 7, 8, 9, V.sep, 1, 2, V.bos, 5]
    with pytest.raises(MalformedSequence):
        detokenize_mesh(TokenSequence(toks), V)
    dec = detokenize_mesh(TokenSequence(toks), V, strict=False)
    assert dec.mesh.n_faces == 1 and dec.dropped_faces == 1 and not dec.complete


def test_token_files(tmp_path):
    mesh, _ = triangulate_fan(toy_buildings(1, seed=2)[0][1])
    seq = tokenize_mesh(mesh, V)
    save_tokens(tmp_path / "t.lcdt", seq)
    save_tokens_text(tmp_path / "t.txt", seq)
    assert (tmp_path / "t.lcdt").read_bytes()[:4] == b"LCDT"
    assert load_tokens(tmp_path / "t.lcdt") == seq == load_tokens_text(tmp_path / "t.txt")
