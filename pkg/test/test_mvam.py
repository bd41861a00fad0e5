"""
Multi-view alignment attention: per-patch math, whole-map oracle, gradients
"""

import math

import numpy as np
import pytest
import torch

from geometry.homography import make_homography, pairwise_from_poses, rescale_homography
from geometry.view_graph import build_view_graph
from geometry.window import PosEncodingConfig, positional_encoding, search_window
from network.mvam import (FeatureMap, MultiViewAlignment, align_feature_map, align_patch,
                          attention_weights, encode_displacements, project_qkv)
from utils.config import AlignConfig
from utils.errors import DimensionMismatch, EmptyCandidateSet, EmptyWindow


def _module(channels=8, dtype=torch.float64, randomize_out=True):
    module = MultiViewAlignment(channels).to(dtype)
    if randomize_out:
        torch.nn.init.normal_(module.out_proj.weight, std=0.3)
    return module


def _poses(rng, m):
    out = []
    for view in range(m):
        mat = np.eye(3)
        mat[:2, :2] += rng.uniform(-0.05, 0.05, size=(2, 2))
        mat[:2, 2] = rng.uniform(-1.5, 1.5, size=2)
        out.append(make_homography(mat, view, view))
    return out


def test_attention_weights_normalised_and_max_subtracted():
    q = torch.randn(4, dtype=torch.float64)
    keys = torch.randn(6, 4, dtype=torch.float64) * 100
    alpha = attention_weights(q, keys)
    assert torch.all(alpha >= 0)
    assert float(alpha.sum()) == pytest.approx(1.0, abs=1e-6)
    assert torch.isfinite(alpha).all()


def test_attention_weights_equal_keys_are_uniform():
    q = torch.randn(4, dtype=torch.float64)
    keys = torch.ones(5, 4, dtype=torch.float64)
    assert torch.allclose(attention_weights(q, keys), torch.full((5,), 0.2, dtype=torch.float64))


def test_attention_weights_mask_and_empty():
    q = torch.randn(4)
    keys = torch.randn(3, 4)
    mask = torch.tensor([True, False, True])
    alpha = attention_weights(q, keys, mask)
    assert alpha[1] == 0
    assert float(alpha.sum()) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(EmptyCandidateSet):
        attention_weights(q, keys[:0])
    with pytest.raises(EmptyCandidateSet):
        attention_weights(q, keys, torch.zeros(3, dtype=torch.bool))


def test_single_candidate_returns_its_value():
    q = torch.randn(4)
    keys = torch.randn(1, 4)
    values = torch.randn(1, 4)
    assert torch.allclose(align_patch(q, keys, values), values[0])


def test_align_patch_is_permutation_invariant():
    q = torch.randn(8, dtype=torch.float64)
    keys = torch.randn(7, 8, dtype=torch.float64)
    values = torch.randn(7, 8, dtype=torch.float64)
    perm = torch.randperm(7)
    assert torch.allclose(align_patch(q, keys, values), align_patch(q, keys[perm], values[perm]), atol=1e-12)


def test_aligned_value_is_a_convex_combination():
    generator = torch.Generator().manual_seed(4)
    q = torch.randn(50, 6, dtype=torch.float64, generator=generator)
    keys = torch.randn(50, 9, 6, dtype=torch.float64, generator=generator) * 4
    values = torch.randn(50, 9, 6, dtype=torch.float64, generator=generator)
    mask = torch.rand(50, 9, generator=generator) < 0.6
    mask[:, 0] = True

    alpha = attention_weights(q, keys, mask)
    assert torch.allclose(alpha.sum(dim=-1), torch.ones(50, dtype=torch.float64), atol=1e-6)
    assert torch.all(alpha >= 0) and torch.all(alpha[~mask] == 0)

    out = align_patch(q, keys, values, mask)
    lo = values.masked_fill(~mask[..., None], math.inf).min(dim=1).values
    hi = values.masked_fill(~mask[..., None], -math.inf).max(dim=1).values
    assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)
    assert torch.allclose(out, torch.einsum("nk,nkd->nd", alpha, values), atol=1e-12)


def test_project_qkv_adds_encoding_before_projection():
    module = _module(8)
    f_q = torch.randn(8, dtype=torch.float64)
    f_c = torch.randn(3, 8, dtype=torch.float64)
    delta = torch.tensor([[0.5, -0.5], [0.0, 0.0], [1.0, 2.0]], dtype=torch.float64)
    q, k, v = project_qkv(f_q, f_c, delta, module)
    gamma = torch.as_tensor(np.stack([positional_encoding(d, module.pe_config) for d in delta.numpy()]))
    assert torch.allclose(q, f_q @ module.w_q.weight.T)
    assert torch.allclose(k, (f_c + gamma) @ module.w_k.weight.T, atol=1e-12)
    assert torch.allclose(v, (f_c + gamma) @ module.w_v.weight.T, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        project_qkv(torch.randn(5, dtype=torch.float64), f_c, delta, module)


def test_encode_displacements_matches_numpy():
    cfg = PosEncodingConfig(12)
    delta = torch.tensor([[0.3, -1.7], [2.0, 0.25]], dtype=torch.float64)
    expected = np.stack([positional_encoding(d, cfg) for d in delta.numpy()])
    assert np.allclose(encode_displacements(delta, cfg).numpy(), expected, atol=1e-12)


def test_disabled_module_is_identity():
    module = _module(8, randomize_out=True)
    module.disable()
    x = torch.randn(2, 8, 3, 3, dtype=torch.float64)
    fmap = FeatureMap(x, 1.0)
    graph = build_view_graph(2, "ring")
    homographies = pairwise_from_poses([make_homography(np.eye(3), m, m) for m in range(2)])
    out = align_feature_map(fmap, graph, homographies, module, AlignConfig(radius=3))
    assert torch.equal(out.data, x)


def _oracle(x, graph, homographies, module, cfg, scale):
    """Triple loop over views, rows and columns using search_window directly."""
    m, c, h, w = x.shape
    out = x.clone()
    pe = module.pe_config
    for i in range(m):
        for y in range(h):
            for xx in range(w):
                feats, deltas = [], []
                if cfg.include_self:
                    feats.append(x[i, :, y, xx])
                    deltas.append(np.zeros(2))
                for j in graph.neighbors[i]:
                    scaled = rescale_homography(homographies[(i, j)], scale, scale)
                    try:
                        cands = search_window(scaled, (xx, y), cfg.radius, (h, w))
                    except EmptyWindow:
                        cands = []
                    for cand in cands:
                        feats.append(x[j, :, cand.position[1], cand.position[0]])
                        deltas.append(cand.displacement)
                if not feats:
                    continue
                f_c = torch.stack(feats)
                gamma = torch.as_tensor(np.stack([positional_encoding(d, pe) for d in deltas]), dtype=x.dtype)
                q = module.w_q.weight @ x[i, :, y, xx]
                k = (f_c + gamma) @ module.w_k.weight.T
                v = (f_c + gamma) @ module.w_v.weight.T
                logits = k @ q / math.sqrt(q.shape[0])
                alpha = torch.softmax(logits, dim=0)
                out[i, :, y, xx] = x[i, :, y, xx] + module.out_proj.weight @ (alpha @ v)
    return out


@pytest.mark.parametrize("include_self", [True, False])
def test_align_feature_map_matches_triple_loop(rng, include_self):
    m, c, h, w = 3, 8, 8, 8
    graph = build_view_graph(m, "ring")
    homographies = pairwise_from_poses(_poses(rng, m))
    module = _module(c)
    cfg = AlignConfig(radius=3, include_self=include_self)
    x = torch.randn(m, c, h, w, dtype=torch.float64)
    got = align_feature_map(FeatureMap(x, 0.5), graph, homographies, module, cfg)
    expected = _oracle(x, graph, homographies, module, cfg, 0.5)
    assert got.data.shape == x.shape
    assert torch.allclose(got.data, expected, atol=1e-7)


def test_align_feature_map_checks_view_count(rng):
    graph = build_view_graph(3, "ring")
    homographies = pairwise_from_poses(_poses(rng, 3))
    with pytest.raises(DimensionMismatch):
        align_feature_map(FeatureMap(torch.randn(2, 8, 4, 4), 1.0), graph, homographies,
                          _module(8, torch.float32), AlignConfig())


def test_gradients_match_finite_differences(rng):
    m, c, h, w = 2, 4, 4, 4
    graph = build_view_graph(m, "ring")
    homographies = pairwise_from_poses(_poses(rng, m))
    module = _module(c)
    cfg = AlignConfig(radius=2)
    x = torch.randn(m, c, h, w, dtype=torch.float64)
    target = torch.randn(m, c, h, w, dtype=torch.float64)

    def loss_fn():
        out = align_feature_map(FeatureMap(x, 1.0), graph, homographies, module, cfg).data
        return ((out - target) ** 2).sum()

    module.zero_grad()
    loss_fn().backward()
    params = list(module.parameters())
    eps = 1e-5
    for _ in range(20):
        param = params[int(rng.integers(len(params)))]
        flat_index = int(rng.integers(param.numel()))
        analytic = param.grad.view(-1)[flat_index].item()
        with torch.no_grad():
            original = param.view(-1)[flat_index].item()
            param.view(-1)[flat_index] = original + eps
            plus = loss_fn().item()
            param.view(-1)[flat_index] = original - eps
            minus = loss_fn().item()
            param.view(-1)[flat_index] = original
        numeric = (plus - minus) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(numeric))
