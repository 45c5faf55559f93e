import numpy as np
import pytest
import torch

from toydrive.encoders import (
    CapacityError,
    ConditionEncoder,
    MapEncoder,
    OutOfVocabularyError,
    TextVocabulary,
    box_features,
    pose_features,
    select_boxes_for_view,
)
from toydrive.geometry import Box3D, f_viz
from toydrive.toyworld import LOCATIONS, OBJECT_CLASSES, TIMES_OF_DAY, WEATHERS, build_prompt, make_rig, sample_scene

from gradcheck import check_module_grads

D = 32


@pytest.fixture
def enc():
    torch.manual_seed(0)
    return ConditionEncoder(d_emb=D, num_bands=3)


def random_box(rng, cls=None):
    return Box3D(int(rng.integers(0, 4)) if cls is None else cls, rng.uniform(-20, 20, 3),
                 rng.uniform(0.5, 6, 3), float(rng.uniform(-3.1, 3.1)))


class TestText:
    def test_every_prompt_in_vocabulary(self):
        vocab = TextVocabulary()
        for loc in LOCATIONS:
            for t in TIMES_OF_DAY:
                for w in WEATHERS:
                    s = sample_scene(0)
                    s.location, s.time_of_day, s.weather = loc, t, w
                    assert len(vocab.encode(build_prompt(s))) == 11
        for name in OBJECT_CLASSES:
            vocab.encode(name)

    def test_oov(self, enc):
        with pytest.raises(OutOfVocabularyError) as err:
            enc.embed_text("a zeppelin at toytown")
        assert err.value.word == "zeppelin"

    def test_deterministic(self, enc):
        a = enc.embed_text("A driving scene image at toytown. sunny, day.")
        b = enc.embed_text("A driving scene image at toytown. sunny, day.")
        assert torch.equal(a.tokens, b.tokens) and a.mask.all()

    def test_one_word_locality(self, enc):
        a = enc.embed_text("A driving scene image at toytown. sunny, day.").tokens
        b = enc.embed_text("A driving scene image at toytown. rain, day.").tokens
        differ = (a != b).any(dim=1)
        assert differ.tolist() == [i == 7 for i in range(11)]
        # the difference is the word vector alone: positions cancel
        emb = enc.text.embedding.weight
        vocab = enc.text.vocab
        torch.testing.assert_close(a[7] - b[7], emb[vocab.index["sunny"]] - emb[vocab.index["rain"]], rtol=0, atol=1e-6)

    def test_too_long(self, enc):
        with pytest.raises(ValueError):
            enc.embed_text(" ".join(["a"] * 17))


class TestCamera:
    def test_dim_and_distinct(self, enc):
        rig = make_rig()
        hs = [enc.encode_camera(p) for p in rig.poses]
        assert all(h.shape == (D,) for h in hs)
        assert not torch.equal(hs[0], hs[1]) and not torch.equal(hs[1], hs[2])

    def test_feature_length(self):
        assert pose_features(make_rig().poses[0], 4).shape == (7 * 24,)

    def test_scene_embedding(self, enc):
        rig = make_rig()
        h_t = enc.embed_text("A driving scene image at toytown. sunny, day.")
        seqs = [ConditionEncoder.scene_embedding(enc.encode_camera(p), h_t) for p in rig.poses]
        for p, s in zip(rig.poses, seqs):
            assert len(s) == 12 and s.mask.all()
            assert torch.equal(s.tokens[0], enc.encode_camera(p))
        assert torch.equal(seqs[0].tokens[1:], seqs[2].tokens[1:])
        empty = enc.embed_text("")
        assert len(ConditionEncoder.scene_embedding(enc.encode_camera(rig.poses[0]), empty)) == 1


class TestBoxes:
    def test_class_embedding(self, enc):
        vocab = enc.text.vocab
        car = enc.class_embedding(0)
        expected = enc.text.embedding.weight[vocab.index["car"]] + enc.text.positions[0]
        torch.testing.assert_close(car, expected)
        barrier = enc.class_embedding(3)
        ids = torch.tensor([vocab.index["road"], vocab.index["barrier"]])
        torch.testing.assert_close(barrier, enc.text(ids).mean(0))
        embs = enc.class_embeddings()
        for i in range(4):
            for j in range(i + 1, 4):
                assert not torch.allclose(embs[i], embs[j])

    def test_encode_box(self, enc, rng):
        box = random_box(rng, cls=0)
        a, b = enc.encode_box(box), enc.encode_box(box)
        assert a.shape == (D,) and torch.equal(a, b)
        other = Box3D(2, box.center, box.size, box.yaw)
        assert not torch.allclose(a, enc.encode_box(other))
        assert box_features(box, 3, 24.0).shape == (8 * 18,)

    def test_all_behind_is_padding(self, enc):
        pose = make_rig().poses[1]
        boxes = [Box3D(0, (-8 - i, 0, 1), (1, 1, 1), 0.0) for i in range(3)]
        seq = enc.encode_boxes_for_view(boxes, pose, max_boxes=5)
        assert not seq.mask.any()
        assert all(torch.equal(t, enc.null_box_token()) for t in seq.tokens)

    def test_visible_set_matches_oracle(self, enc, rng):
        rig = make_rig()
        for _ in range(20):
            boxes = [random_box(rng) for _ in range(6)]
            for pose in rig.poses:
                seq = enc.encode_boxes_for_view(boxes, pose, max_boxes=8)
                visible = [i for i, b in enumerate(boxes) if f_viz(b, pose)]
                assert int(seq.mask.sum()) == len(visible)
                for k, i in enumerate(visible):
                    assert torch.equal(seq.tokens[k], enc.encode_box(boxes[i]))

    def test_capacity(self, enc):
        pose = make_rig().poses[1]
        boxes = [Box3D(0, (8 + 2 * i, 0, 1), (1, 1, 1), 0.0) for i in range(4)]
        with pytest.raises(CapacityError):
            enc.encode_boxes_for_view(boxes, pose, max_boxes=3)

    def test_augmentation_rate(self):
        pose = make_rig().poses[1]
        boxes = [Box3D(0, (-10, 0, 1), (1, 1, 1), 0.0)] * 10_000
        chosen = select_boxes_for_view(boxes, pose, 0.10, np.random.default_rng(0))
        assert abs(len(chosen) / 10_000 - 0.10) <= 0.01
        assert select_boxes_for_view(boxes, pose, 0.0) == []

    def test_null_token_round_trip(self, enc):
        state = enc.state_dict()
        other = ConditionEncoder(d_emb=D, num_bands=3)
        other.load_state_dict(state)
        assert torch.equal(other.null_box_token(), enc.null_box_token())


class TestGradients:
    """Autograd vs central differences in double precision."""

    def test_camera_mlp(self, enc):
        enc = enc.double()
        feats = torch.as_tensor(pose_features(make_rig().poses[0], 3))
        assert check_module_grads(enc.camera, lambda: enc.camera(feats)) < 1e-4

    def test_box_mlps(self, enc, rng):
        enc = enc.double()
        box = random_box(rng)
        for module in (enc.box.mlp_p, enc.box.mlp_b):
            assert check_module_grads(module, lambda: enc.encode_box(box)) < 1e-4


class TestMapEncoder:
    def make(self):
        torch.manual_seed(1)
        return MapEncoder(3, (8, 16), (8, 16), D, 2)

    def test_zero_at_init(self):
        m = self.make()
        outs = m(torch.rand(2, 3, 8, 8), torch.randn(2, 5, D), None)
        assert [tuple(o.shape) for o in outs] == [(2, 8, 8, 16), (2, 16, 4, 8), (2, 16, 4, 8)]
        assert all((o == 0).all() for o in outs)

    def test_zero_map_deterministic(self):
        m = self.make()
        ctx = torch.randn(1, 5, D)
        a = m(torch.zeros(1, 3, 8, 8), ctx, None)
        b = m(torch.zeros(1, 3, 8, 8), ctx, None)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_gradient_reaches_branch_after_one_step(self):
        m = self.make()
        opt = torch.optim.SGD(m.parameters(), lr=0.1)
        bev, ctx = torch.rand(1, 3, 8, 8), torch.randn(1, 5, D)
        for _ in range(2):
            opt.zero_grad()
            loss = sum((o - 1).pow(2).mean() for o in m(bev, ctx, None))
            loss.backward()
            opt.step()
        assert m.stem[0].weight.grad.norm() > 0
        assert m.levels[0].attn.to_q.weight.grad.norm() > 0
