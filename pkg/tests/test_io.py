import dataclasses
import warnings

import numpy as np
import pytest

from hamreid.checkpoint import (CheckpointError, ConfigMismatchWarning, load_checkpoint,
                                save_checkpoint)
from hamreid.config import (ConfigError, RunConfig, config_hash, from_text, load_config,
                            model_section_text, to_text)
from hamreid.data import (ManifestError, load_embeddings, load_image, load_images, load_manifest,
                          read_pgm, relabel, save_embeddings, synth_generate, write_pgm)
from hamreid.heads import MgoConfig, MpfeConfig
from hamreid.metrics import EmbeddingSet, evaluate
from hamreid.model import Model, ModelConfig
from hamreid.tensor import make_rng, save_tensor


def write_manifest(tmp_path, rows, touch=True):
    lines = ["path,pid,camid,split"] + rows
    for row in rows:
        if touch:
            (tmp_path / row.split(",")[0]).write_bytes(b"")
    p = tmp_path / "m.csv"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_manifest_four_rows(tmp_path):
    p = write_manifest(tmp_path, ["a.png,1,0,train", "b.png,1,1,train", "c.png,2,0,query",
                                  "d.png,2,1,gallery"])
    m = load_manifest(p)
    assert len(m) == 4
    assert [r.split for r in m.records] == ["train", "train", "query", "gallery"]
    assert m.records[0].path == tmp_path / "a.png"


def test_manifest_bad_split_names_the_line(tmp_path):
    p = write_manifest(tmp_path, ["a.png,1,0,train", "b.png,1,1,foo"])
    with pytest.raises(ManifestError, match=r"m\.csv:3: bad split 'foo'"):
        load_manifest(p)


def test_manifest_junk_pid_only_in_gallery(tmp_path):
    with pytest.raises(ManifestError, match="junk"):
        load_manifest(write_manifest(tmp_path, ["a.png,-1,0,train"]))
    assert load_manifest(write_manifest(tmp_path, ["a.png,-1,0,gallery"])).records[0].pid == -1


@pytest.mark.parametrize("rows,pattern", [
    (["a.png,1,0"], "expected 4 fields"),
    (["a.png,x,0,train"], "integers"),
    (["a.png,1,0,train", "a.png,1,1,train"], "duplicate"),
])
def test_manifest_row_errors(tmp_path, rows, pattern):
    with pytest.raises(ManifestError, match=pattern):
        load_manifest(write_manifest(tmp_path, rows))


def test_manifest_missing_image_and_header(tmp_path):
    with pytest.raises(ManifestError, match="missing image"):
        load_manifest(write_manifest(tmp_path, ["gone.png,1,0,train"], touch=False))
    bad = tmp_path / "h.csv"
    bad.write_text("file,pid,cam,split\n")
    with pytest.raises(ManifestError, match=":1:"):
        load_manifest(bad)
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "nope.csv")


def test_synth_smallest_case(tmp_path):
    m = synth_generate(2, 2, 2, (48, 32), 0, tmp_path)
    assert len(m) == 4
    (q,), (g,) = m.split("query"), m.split("gallery")
    assert q.pid == g.pid and q.camid != g.camid
    assert {r.pid for r in m.split("train")}.isdisjoint({q.pid})
    assert load_manifest(tmp_path / "manifest.csv").records == m.records


def test_synth_closed_set_split(tmp_path):
    m = synth_generate(4, 8, 2, (48, 32), 0, tmp_path, closed_set=True)
    train_ids = {r.pid for r in m.split("train")}
    assert train_ids == {r.pid for r in m.split("query")} == {0, 1, 2, 3}
    assert all(r.camid == 0 for r in m.split("query"))
    assert all(r.camid == 1 for r in m.split("gallery"))
    assert len(m.split("train")) == 16


def test_synth_is_byte_deterministic(tmp_path):
    a = synth_generate(3, 4, 2, (48, 32), 11, tmp_path / "a")
    b = synth_generate(3, 4, 2, (48, 32), 11, tmp_path / "b")
    for ra, rb in zip(a.records, b.records):
        assert ra.path.read_bytes() == rb.path.read_bytes()
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()


def test_synth_identities_differ_more_than_cameras(tmp_path):
    m = synth_generate(6, 4, 2, (48, 32), 3, tmp_path, test_ids=0)
    imgs = {(r.pid, r.camid, r.path.name): load_image(r.path, (48, 32)) for r in m.records}
    mean_of = {pid: np.mean([v for k, v in imgs.items() if k[0] == pid], axis=0) for pid in range(6)}
    within = np.mean([np.abs(v - mean_of[k[0]]).mean() for k, v in imgs.items()])
    between = np.mean([np.abs(mean_of[a] - mean_of[b]).mean() for a in range(6) for b in range(a)])
    assert between > within


def test_raw_pixel_retrieval_beats_chance(tmp_path):
    m = synth_generate(16, 8, 2, (48, 32), 0, tmp_path)
    sets = []
    for split in ("query", "gallery"):
        recs = m.split(split)
        x = load_images(recs, (48, 32)).reshape(len(recs), -1)
        sets.append(EmbeddingSet(x, [r.pid for r in recs], [r.camid for r in recs], split))
    chance = 1 / len(set(sets[1].pids.tolist()))
    assert evaluate(*sets).rank(1) > 2 * chance


def test_synth_rejects_single_identity(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(1, 2, 2, (48, 32), 0, tmp_path)


def test_image_loading_resizes_and_reads_tensor_dumps(tmp_path):
    m = synth_generate(2, 2, 2, (48, 32), 0, tmp_path)
    img = load_image(m.records[0].path, (24, 16))
    assert img.shape == (3, 24, 16) and 0 <= img.min() and img.max() <= 1
    raw = make_rng(0).uniform(size=(3, 48, 32))
    save_tensor(tmp_path / "x.tensor", raw)
    np.testing.assert_array_equal(load_image(tmp_path / "x.tensor", (48, 32)), raw)
    with pytest.raises(ValueError):
        load_image(tmp_path / "x.tensor", (24, 16))


def test_relabel_is_contiguous_in_pid_order():
    labels, mapping = relabel([42, 7, 42, 100])
    assert labels.tolist() == [1, 0, 1, 2]
    assert mapping == {7: 0, 42: 1, 100: 2}


def test_pgm_round_trip(tmp_path):
    v = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "m.pgm", v)
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), [[0, 128], [255, 64]])


def test_embedding_dump_round_trip(tmp_path):
    m = synth_generate(2, 2, 2, (48, 32), 0, tmp_path / "d")
    desc = make_rng(1).normal(size=(4, 6))
    save_embeddings(tmp_path / "e", desc, m.records)
    back, paths, pids, cams = load_embeddings(tmp_path / "e.tensor")
    np.testing.assert_array_equal(back, desc)
    assert pids.tolist() == [r.pid for r in m.records]
    assert cams.tolist() == [r.camid for r in m.records]
    assert len(paths) == 4


# ---------------------------------------------------------------------------
# configuration


def test_default_config_round_trips_through_text():
    rc = RunConfig()
    assert from_text(to_text(rc)) == rc


def test_custom_config_round_trips():
    text = "[attention]\nordering = C+cat+S\n[fusion]\nstages = 2,3,4\n[model]\nnum_ids = 5\n" \
           "[training]\nepochs = 7\nP = 4\nmargin = 0.3\n"
    rc = from_text(text)
    assert rc.model.attention.ordering.label == "C+©+S"
    assert rc.model.fusion.included_stages == (2, 3, 4)
    assert not rc.num_ids_auto and rc.model.num_ids == 5
    assert rc.train.epochs == 7 and rc.train.P == 4 and rc.train.margin == 0.3
    assert from_text(to_text(rc)) == rc


def test_config_inline_comments():
    rc = from_text("[fusion]\nstages = 3,4   ; deepest two\n[training]\nepochs = 9 # short\n")
    assert rc.model.fusion.included_stages == (3, 4) and rc.train.epochs == 9


@pytest.mark.parametrize("text,pattern", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[training]\nepochz = 3\n", "unknown key"),
    ("[training]\nepochs = three\n", "cannot parse"),
    ("[attention]\nordering = S+C\n", "ordering"),
    ("[backbone]\nstage_channels = 8,16\n", "four entries"),
    ("not an ini", "unparseable"),
])
def test_config_parse_errors(text, pattern):
    with pytest.raises((ConfigError, ValueError), match=pattern):
        from_text(text)


@pytest.mark.parametrize("text,n_ids", [
    ("[mgo]\nk = 4\n", None),  # stage-4 height 6 does not split into 4 stripes
    ("[attention]\ncam_reduction = 7\n", None),
    ("[fusion]\nstages = 1,5\n", None),
    ("[training]\nP = 9\n", 8),
    ("[model]\nnum_ids = 1\n", None),
    ("[eval]\nmax_rank = 0\n", None),
])
def test_invalid_configs_fail_validation(text, n_ids):
    with pytest.raises(ConfigError):
        from_text(text).validate(n_ids)


def test_fixed_num_ids_must_match_train_split():
    rc = from_text("[model]\nnum_ids = 5\n")
    with pytest.raises(ConfigError):
        rc.with_num_ids(6)
    assert RunConfig().with_num_ids(6).model.num_ids == 6


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")


def test_config_hash_tracks_model_only():
    a = ModelConfig(num_ids=4)
    assert config_hash(a) == config_hash(ModelConfig(num_ids=4))
    assert config_hash(a) != config_hash(dataclasses.replace(a, mgo=MgoConfig(3, (1, 2, 3))))
    assert "[training]" not in model_section_text(a)


# ---------------------------------------------------------------------------
# checkpoints


def small_model(**kw):
    return Model(ModelConfig(mpfe=MpfeConfig(16, 16), num_ids=3, **kw), seed=4)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = small_model()
    model.store.buffers["stem.bn.running_mean"][:] = make_rng(0).normal(size=8)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected=model.cfg)
    assert back.cfg == model.cfg
    for src, dst in ((model.store.params, back.store.params),
                     (model.store.buffers, back.store.buffers)):
        assert src.keys() == dst.keys()
        for k in src:
            assert src[k].tobytes() == dst[k].tobytes()


def test_checkpoint_detects_corruption(tmp_path):
    save_checkpoint(small_model(), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    for offset in (3, 12, len(raw) // 2):
        bad = bytearray(raw)
        bad[offset] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_checkpoint_config_mismatch_warns(tmp_path):
    save_checkpoint(small_model(), tmp_path / "m.ckpt")
    other = ModelConfig(backbone=ModelConfig().backbone, mgo=MgoConfig(4, (1, 2, 3, 4)),
                        mpfe=MpfeConfig(16, 16), num_ids=3)
    with pytest.warns(ConfigMismatchWarning):
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(tmp_path / "m.ckpt", expected=other)
    with pytest.warns(ConfigMismatchWarning):
        model = load_checkpoint(tmp_path / "m.ckpt", expected=other, override=True)
    assert model.cfg.mgo.k == 6


def test_checkpoint_matching_config_is_silent(tmp_path):
    model = small_model()
    save_checkpoint(model, tmp_path / "m.ckpt")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(tmp_path / "m.ckpt", expected=model.cfg)


def test_checkpoint_predictions_survive_round_trip(tmp_path):
    model = small_model()
    x = make_rng(2).normal(size=(2, 3, 48, 32))
    save_checkpoint(model, tmp_path / "m.ckpt")
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "m.ckpt").embed(x), model.embed(x))
