import numpy as np
import pytest

from fedgate.data import HashEmbedder
from fedgate.moe import SelectionMatrix, init_dgmoe_layer
from fedgate.scene import (Detection, ObjectGroups, SceneConfig,
                           analyze_scene, assign_tokens_to_groups,
                           categorize_objects, enhance_group_tokens,
                           extract_target_entities, identity_assignment,
                           parse_scene, parse_scene_backward)

VOCAB = ["plate", "cup", "bottle", "lamp"]


def _provider(dim=8):
    return HashEmbedder(dim, seed=0)


# ---- entity extraction ----

def test_extract_in_first_appearance_order():
    out = extract_target_entities("put the cup on the plate", VOCAB)
    assert out == ["cup", "plate"]


def test_extract_no_match_and_case():
    assert extract_target_entities("wave hello", VOCAB) == []
    assert extract_target_entities("lift the CUP now", VOCAB) == ["cup"]


def test_extract_whole_words_only():
    assert extract_target_entities("tighten the clamp", VOCAB) == []
    assert extract_target_entities("stack the cups", VOCAB) == []


def test_extract_empty_vocabulary_rejected():
    with pytest.raises(ValueError):
        extract_target_entities("anything", [])


# ---- categorization ----

def test_categorize_priority_rules():
    provider = _provider()
    dets = [Detection("drawer", 0.9), Detection("table", 0.8),
            Detection("dust", 0.2)]
    groups = categorize_objects(["drawer"], dets, provider)
    assert groups.targets == ["drawer"]
    assert groups.surrounding == ["table"]
    assert groups.background == ["dust"]


def test_categorize_no_entities_uses_confidence():
    provider = _provider()
    dets = [Detection("cup", 0.7), Detection("plate", 0.3)]
    groups = categorize_objects([], dets, provider)
    assert groups.targets == []
    assert groups.surrounding == ["cup"]
    assert groups.background == ["plate"]


def test_categorize_exact_label_is_target_even_low_confidence():
    provider = _provider()
    groups = categorize_objects(["cup"], [Detection("cup", 0.05)], provider)
    assert groups.targets == ["cup"]


def test_categorize_dedupes_repeated_labels():
    provider = _provider()
    dets = [Detection("cup", 0.9), Detection("cup", 0.9),
            Detection("lamp", 0.9)]
    groups = categorize_objects(["cup"], dets, provider)
    assert groups.targets == ["cup"]
    assert groups.surrounding == ["lamp"]


def test_categorize_threshold_validation():
    provider = _provider()
    with pytest.raises(ValueError):
        categorize_objects([], [], provider, similarity_threshold=0.0)
    with pytest.raises(ValueError):
        categorize_objects([], [], provider, similarity_threshold=1.0)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection("", 0.5)
    with pytest.raises(ValueError):
        Detection("cup", 1.5)


# ---- token assignment ----

def test_assign_splits_twenty_tokens_eight_eight_four():
    provider = _provider()
    rng = np.random.default_rng(0)
    tokens = rng.standard_normal((20, 8))
    groups = ObjectGroups(targets=["cup"], surrounding=["plate"],
                          background=["lamp"])
    out = assign_tokens_to_groups(tokens, groups, provider, tokens_per_group=8)
    assert out["target"].size == 8
    assert out["surrounding"].size == 8
    assert out["background"].size == 4
    merged = np.concatenate([out[n] for n in ("target", "surrounding",
                                              "background")])
    assert len(set(merged.tolist())) == 20


def test_assign_small_scene_goes_entirely_to_first_group():
    provider = _provider()
    tokens = np.random.default_rng(1).standard_normal((8, 8))
    groups = ObjectGroups(targets=["cup"])
    out = assign_tokens_to_groups(tokens, groups, provider, tokens_per_group=8)
    assert out["target"].size == 8
    assert out["surrounding"].size == 0
    assert out["background"].size == 0


def test_assign_matching_token_ranks_first():
    provider = _provider()
    rng = np.random.default_rng(2)
    tokens = 0.01 * rng.standard_normal((10, 8))
    tokens[7] = provider.text_embed("cup")  # cosine 1 with the centroid
    groups = ObjectGroups(targets=["cup"])
    out = assign_tokens_to_groups(tokens, groups, provider, tokens_per_group=3)
    assert out["target"][0] == 7


def test_assign_empty_groups_and_validation():
    provider = _provider()
    tokens = np.random.default_rng(3).standard_normal((5, 8))
    out = assign_tokens_to_groups(tokens, ObjectGroups(), provider)
    for name in ("target", "surrounding", "background"):
        assert out[name].size == 0
    with pytest.raises(ValueError):
        assign_tokens_to_groups(np.zeros((0, 8)), ObjectGroups(), provider)
    with pytest.raises(ValueError):
        assign_tokens_to_groups(tokens, ObjectGroups(), provider,
                                tokens_per_group=0)


# ---- scene analysis ----

def _scene_inputs(n_tokens=20, dim=8, seed=4):
    provider = _provider(dim)
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((n_tokens, dim))
    dets = [Detection("cup", 0.9), Detection("plate", 0.8),
            Detection("lamp", 0.2)]
    return tokens, dets, provider


def test_analyze_scene_order_is_permutation_with_group_prefix():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig(tokens_per_group=8)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    assert sorted(a.order.tolist()) == list(range(20))
    np.testing.assert_array_equal(
        a.order[a.slices["target"]], a.token_groups["target"])
    np.testing.assert_array_equal(
        a.order[a.slices["surrounding"]], a.token_groups["surrounding"])
    np.testing.assert_array_equal(
        a.order[a.slices["background"]], a.token_groups["background"])
    assert a.groups.targets == ["cup"]
    assert a.groups.surrounding == ["plate"]
    assert a.groups.background == ["lamp"]


def test_analyze_scene_remaining_tokens_keep_ascending_order():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig(tokens_per_group=4)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    n_grouped = sum(a.token_groups[n].size for n in a.token_groups)
    tail = a.order[n_grouped:]
    assert (np.diff(tail) > 0).all()


def test_analyze_scene_deterministic():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig()
    a1 = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    a2 = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    np.testing.assert_array_equal(a1.order, a2.order)
    for name in a1.token_groups:
        np.testing.assert_array_equal(a1.token_groups[name],
                                      a2.token_groups[name])


def test_analyze_scene_disabled_is_identity():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig(enabled=False)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    np.testing.assert_array_equal(a.order, np.arange(20))
    for name in a.token_groups:
        assert a.token_groups[name].size == 0


def test_identity_assignment_group_of_empty():
    a = identity_assignment(5)
    assert a.group_of() == {}
    np.testing.assert_array_equal(a.order, np.arange(5))


# ---- enhancement and full parse ----

def test_enhance_preserves_shape_and_skips_empty():
    rng = np.random.default_rng(5)
    p = init_dgmoe_layer(rng, 8, 4, 16)
    tokens = rng.standard_normal((8, 8))
    y, cache = enhance_group_tokens(p, tokens)
    assert y.shape == (8, 8)
    assert cache is not None
    y0, cache0 = enhance_group_tokens(p, np.zeros((0, 8)))
    assert y0.shape == (0, 8)
    assert cache0 is None


def test_parse_scene_without_moe_is_reorder_plus_concat():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig(tokens_per_group=4)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    prop = np.random.default_rng(6).standard_normal((1, 8))
    scene, _ = parse_scene(tokens, prop, a, None)
    np.testing.assert_array_equal(scene.tokens[:20], tokens[a.order])
    np.testing.assert_array_equal(scene.tokens[20:], prop)
    assert scene.n_image == 20


def test_parse_scene_enhances_only_grouped_prefix():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig(tokens_per_group=4)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    rng = np.random.default_rng(7)
    p = init_dgmoe_layer(rng, 8, 4, 16)
    prop = rng.standard_normal((2, 8))
    counts = SelectionMatrix.zeros(1, 4)
    scene, _ = parse_scene(tokens, prop, a, p, record=counts)
    n_grouped = sum(a.token_groups[n].size for n in a.token_groups)
    assert n_grouped == 12
    # ungrouped tokens and proprioception pass through untouched
    np.testing.assert_array_equal(scene.tokens[n_grouped:20],
                                  tokens[a.order][n_grouped:])
    np.testing.assert_array_equal(scene.tokens[20:], prop)
    assert not np.allclose(scene.tokens[:n_grouped], tokens[a.order][:n_grouped])
    assert counts.tokens_seen[0] == n_grouped


def test_parse_scene_backward_finite_difference():
    dim = 6
    provider = _provider(dim)
    rng = np.random.default_rng(8)
    tokens = rng.standard_normal((7, dim))
    dets = [Detection("cup", 0.9), Detection("plate", 0.8)]
    cfg = SceneConfig(tokens_per_group=2)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    p = init_dgmoe_layer(rng, dim, 2, 5)
    p["theta"] = np.full(2, -20.0)  # all accept: smooth everywhere
    prop = rng.standard_normal((1, dim))
    r = rng.standard_normal((8, dim))

    def loss(tok, prp):
        scene, _ = parse_scene(tok, prp, a, p)
        return float((scene.tokens * r).sum())

    _, cache = parse_scene(tokens, prop, a, p)
    dx, d_prop, moe_grads = parse_scene_backward(cache, p, r)

    eps = 1e-6
    fd = np.empty_like(tokens)
    for i in range(tokens.shape[0]):
        for j in range(dim):
            tokens[i, j] += eps
            up = loss(tokens, prop)
            tokens[i, j] -= 2 * eps
            down = loss(tokens, prop)
            tokens[i, j] += eps
            fd[i, j] = (up - down) / (2 * eps)
    np.testing.assert_allclose(dx, fd, rtol=1e-4, atol=1e-7)

    fd_p = np.empty_like(prop)
    for j in range(dim):
        prop[0, j] += eps
        up = loss(tokens, prop)
        prop[0, j] -= 2 * eps
        down = loss(tokens, prop)
        prop[0, j] += eps
        fd_p[0, j] = (up - down) / (2 * eps)
    np.testing.assert_allclose(d_prop, fd_p, rtol=1e-4, atol=1e-7)

    for name in ("w_token", "w1", "b2"):
        flat = p[name].reshape(-1)
        an = moe_grads[name].reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 5)):
            old = flat[i]
            flat[i] = old + eps
            up = loss(tokens, prop)
            flat[i] = old - eps
            down = loss(tokens, prop)
            flat[i] = old
            fdv = (up - down) / (2 * eps)
            denom = max(abs(fdv), abs(an[i]), 1e-6)
            assert abs(fdv - an[i]) / denom < 1e-4, f"{name}[{i}]"


def test_parse_scene_backward_without_moe_restores_order():
    tokens, dets, provider = _scene_inputs()
    cfg = SceneConfig(tokens_per_group=4)
    a = analyze_scene(tokens, dets, "grab the cup", VOCAB, provider, cfg)
    prop = np.zeros((1, 8))
    _, cache = parse_scene(tokens, prop, a, None)
    d_tokens = np.random.default_rng(9).standard_normal((21, 8))
    dx, d_prop, moe_grads = parse_scene_backward(cache, None, d_tokens)
    assert moe_grads is None
    # gradient of a pure permutation is the inverse permutation
    np.testing.assert_array_equal(dx[a.order], d_tokens[:20])
    np.testing.assert_array_equal(d_prop, d_tokens[20:])
