import numpy as np
import pytest

from fpt import Tensor, backward, finite_diff_grad
from fpt import tensor as T
from fpt import transformers as TR
from fpt.errors import ConfigError, ShapeError


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _positions(x):
    """(1,C,H,W) numpy map -> (P,C) position list."""
    _, c, h, w = x.shape
    return x[0].reshape(c, h * w).T


def _project(pos, w, b):
    """Position list through a 1x1 conv expressed as a plain matmul."""
    return pos @ w.data[:, :, 0, 0].T + b.data


def _mixture(k_all, mix):
    kbar = k_all.mean(axis=0)
    return _softmax(np.array([float(m @ kbar) for m in mix]))


def _mos_weights(q, k, pi, n, sim):
    """Loop oracle for MoS-normalized attention weights, (Pq, Pk)."""
    pq, d = q.shape
    pk = k.shape[0]
    dn = d // n
    weights = np.zeros((pq, pk))
    for i in range(pq):
        for part in range(n):
            scores = np.zeros(pk)
            for j in range(pk):
                qi = q[i, part * dn : (part + 1) * dn]
                kj = k[j, part * dn : (part + 1) * dn]
                scores[j] = qi @ kj if sim == "dot" else -((qi - kj) @ (qi - kj))
            weights[i] += pi[part] * _softmax(scores)
    return weights


def st_oracle(x, p, similarity="dot"):
    """Straight-line self-attention reference on a (1,C,H,W) numpy map."""
    _, _, h, w = x.shape
    pos = _positions(x)
    q = _project(pos, p.proj.wq, p.proj.bq)
    k = _project(pos, p.proj.wk, p.proj.bk)
    v = _project(pos, p.proj.wv, p.proj.bv)
    pi = _mixture(k, p.mos.mixture.data)
    out = _mos_weights(q, k, pi, p.mos.n_parts, similarity) @ v
    return out.T.reshape(1, -1, h, w)


def gt_oracle(xf, xc, p, similarity="eud"):
    """Straight-line grounding-attention reference (fine queries, coarse keys)."""
    _, _, hf, wf = xf.shape
    q = _project(_positions(xf), p.proj.wq, p.proj.bq)
    k = _project(_positions(xc), p.proj.wk, p.proj.bk)
    v = _project(_positions(xc), p.proj.wv, p.proj.bv)
    pi = _mixture(k, p.mos.mixture.data)
    out = _mos_weights(q, k, pi, p.mos.n_parts, similarity) @ v
    return out.T.reshape(1, -1, hf, wf)


def lgt_oracle(xf, xc, p):
    """Masked grounding attention: per-query square window, zero fill outside."""
    _, _, hf, wf = xf.shape
    _, _, hc, wc = xc.shape
    s = p.square_size
    r = (s - 1) // 2
    n = p.mos.n_parts
    q = _project(_positions(xf), p.proj.wq, p.proj.bq)
    k = _project(_positions(xc), p.proj.wk, p.proj.bk)
    v = _project(_positions(xc), p.proj.wv, p.proj.bv)
    d = q.shape[1]
    dn = d // n
    pi = _mixture(k, p.mos.mixture.data)
    out = np.zeros((hf * wf, d))
    for y in range(hf):
        for x in range(wf):
            cy, cx = y * hc // hf, x * wc // wf
            keys, vals = [], []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = cy + dy, cx + dx
                    if 0 <= yy < hc and 0 <= xx < wc:
                        keys.append(k[yy * wc + xx])
                        vals.append(v[yy * wc + xx])
                    else:
                        keys.append(np.zeros(d))
                        vals.append(np.zeros(d))
            keys, vals = np.stack(keys), np.stack(vals)
            qi = q[y * wf + x]
            weights = np.zeros(s * s)
            for part in range(n):
                sl = slice(part * dn, (part + 1) * dn)
                diffs = keys[:, sl] - qi[sl]
                weights += pi[part] * _softmax(-(diffs * diffs).sum(axis=1))
            out[y * wf + x] = weights @ vals
    return out.T.reshape(1, d, hf, wf)


class TestSelfTransformer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(40)
        p = TR.init_st_params(rng, d_in=6, d_out=4, n_parts=2)
        x = rng.standard_normal((1, 6, 3, 4))
        got = TR.self_transformer(Tensor(x), p).data
        assert np.abs(got - st_oracle(x, p)).max() < 1e-10

    def test_eud_variant_matches_oracle(self):
        rng = np.random.default_rng(41)
        p = TR.init_st_params(rng, d_in=4, d_out=4, n_parts=2)
        x = rng.standard_normal((1, 4, 2, 3))
        got = TR.self_transformer(Tensor(x), p, similarity="eud").data
        assert np.abs(got - st_oracle(x, p, similarity="eud")).max() < 1e-10

    def test_single_position_returns_value(self):
        rng = np.random.default_rng(42)
        p = TR.init_st_params(rng, d_in=3, d_out=4, n_parts=2)
        x = Tensor(rng.standard_normal((1, 3, 1, 1)))
        got = TR.self_transformer(x, p).data
        from fpt.attention import project_qkv

        v = project_qkv(x, p.proj, "v").data
        assert np.abs(got - v).max() < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(43)
        p = TR.init_st_params(rng, d_in=4, d_out=4, n_parts=2)
        x = rng.standard_normal((1, 4, 3, 4))
        base = TR.self_transformer(Tensor(x), p).data
        for _ in range(5):
            perm = rng.permutation(12)
            xp = x.reshape(1, 4, 12)[:, :, perm].reshape(1, 4, 3, 4)
            got = TR.self_transformer(Tensor(xp), p).data
            expected = base.reshape(1, 4, 12)[:, :, perm].reshape(1, 4, 3, 4)
            assert np.abs(got - expected).max() < 1e-12


class TestGroundingTransformer:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(44)
        p = TR.init_gt_params(rng, d_in=5, d_out=4, n_parts=2)
        xf = rng.standard_normal((1, 5, 4, 4))
        xc = rng.standard_normal((1, 5, 2, 2))
        got = TR.grounding_transformer(Tensor(xf), Tensor(xc), p).data
        assert np.abs(got - gt_oracle(xf, xc, p)).max() < 1e-10

    def test_single_coarse_key(self):
        rng = np.random.default_rng(45)
        p = TR.init_gt_params(rng, d_in=3, d_out=6, n_parts=3)
        xf = Tensor(rng.standard_normal((1, 3, 4, 4)))
        xc = Tensor(rng.standard_normal((1, 3, 1, 1)))
        got = TR.grounding_transformer(xf, xc, p).data
        from fpt.attention import project_qkv

        v = project_qkv(xc, p.proj, "v").data[0, :, 0, 0]
        assert np.abs(got - v[None, :, None, None]).max() < 1e-12

    def test_output_has_fine_shape(self):
        rng = np.random.default_rng(46)
        p = TR.init_gt_params(rng, d_in=4, d_out=4, n_parts=1)
        out = TR.grounding_transformer(
            Tensor(rng.standard_normal((1, 4, 8, 6))),
            Tensor(rng.standard_normal((1, 4, 4, 3))),
            p,
        )
        assert out.shape == (1, 4, 8, 6)

    def test_rejects_locality_params(self):
        rng = np.random.default_rng(47)
        p = TR.init_gt_params(rng, 4, 4, 1, square_size=3)
        x = Tensor(np.zeros((1, 4, 2, 2)))
        with pytest.raises(ConfigError):
            TR.grounding_transformer(x, x, p)


class TestWindowIndices:
    def test_interior_window(self):
        idx = TR.window_indices(4, 4, 4, 4, 3).reshape(4, 4, 9)
        assert np.array_equal(idx[1, 1], [0, 1, 2, 4, 5, 6, 8, 9, 10])

    def test_corner_is_zero_filled(self):
        idx = TR.window_indices(4, 4, 4, 4, 3).reshape(4, 4, 9)
        assert np.array_equal(idx[0, 0], [-1, -1, -1, -1, 0, 1, -1, 4, 5])

    def test_scale_ratio_center_mapping(self):
        idx = TR.window_indices(4, 4, 2, 2, 1).reshape(4, 4, 1)
        # fine (3,3) maps to coarse (1,1) = flat index 3
        assert idx[3, 3, 0] == 3
        assert idx[0, 0, 0] == 0
        assert idx[1, 2, 0] == 1

    def test_even_square_size_rejected(self):
        with pytest.raises(ConfigError):
            TR.window_indices(4, 4, 2, 2, 2)


class TestLocalityGroundingTransformer:
    def test_matches_masked_oracle(self):
        rng = np.random.default_rng(48)
        p = TR.init_gt_params(rng, d_in=4, d_out=4, n_parts=2, square_size=3)
        xf = rng.standard_normal((1, 4, 6, 6))
        xc = rng.standard_normal((1, 4, 3, 3))
        got = TR.locality_grounding_transformer(Tensor(xf), Tensor(xc), p).data
        assert np.abs(got - lgt_oracle(xf, xc, p)).max() < 1e-10

    def test_window_one_returns_center_value(self):
        rng = np.random.default_rng(49)
        p = TR.init_gt_params(rng, d_in=3, d_out=4, n_parts=2, square_size=1)
        xf = Tensor(rng.standard_normal((1, 3, 4, 4)))
        xc = Tensor(rng.standard_normal((1, 3, 2, 2)))
        got = TR.locality_grounding_transformer(xf, xc, p).data
        from fpt.attention import project_qkv

        v = project_qkv(xc, p.proj, "v").data
        for y in range(4):
            for x in range(4):
                assert np.abs(got[0, :, y, x] - v[0, :, y // 2, x // 2]).max() < 1e-12

    def test_full_window_equals_global_when_no_border(self):
        # a window covering the whole coarse map with no out-of-range cells
        # behaves exactly like unrestricted grounding attention
        rng = np.random.default_rng(50)
        p = TR.init_gt_params(rng, d_in=4, d_out=4, n_parts=2, square_size=3)
        xf = rng.standard_normal((1, 4, 3, 3))
        xc = rng.standard_normal((1, 4, 3, 3))
        got = TR.locality_grounding_transformer(Tensor(xf), Tensor(xc), p).data
        # only the center query (1,1) sees the full in-bounds window
        pg = TR.GtParams(proj=p.proj, mos=p.mos, square_size=None)
        ref = TR.grounding_transformer(Tensor(xf), Tensor(xc), pg).data
        assert np.abs(got[0, :, 1, 1] - ref[0, :, 1, 1]).max() < 1e-12

    def test_requires_square_size(self):
        rng = np.random.default_rng(51)
        p = TR.init_gt_params(rng, 4, 4, 1)
        x = Tensor(np.zeros((1, 4, 2, 2)))
        with pytest.raises(ConfigError):
            TR.locality_grounding_transformer(x, x, p)


def _identity_kernel(c):
    w = np.zeros((c, c, 3, 3))
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    return Tensor(w)


class TestRenderingTransformer:
    def test_identity_construction(self):
        # refine = center tap, down = zero, fuse = center tap
        # output reduces to Q scaled per channel by GAP(KV)
        rng = np.random.default_rng(52)
        c = 3
        p = TR.RtParams(
            refine_w=_identity_kernel(c),
            refine_b=Tensor(np.zeros(c)),
            down_w=Tensor(np.zeros((c, c, 3, 3))),
            down_b=Tensor(np.zeros(c)),
            fuse_w=_identity_kernel(c),
            fuse_b=Tensor(np.zeros(c)),
        )
        q = rng.standard_normal((1, c, 4, 4))
        kv = rng.standard_normal((1, c, 8, 8))
        got = TR.rendering_transformer(Tensor(q), Tensor(kv), p).data
        gap = kv.mean(axis=(2, 3), keepdims=True)
        assert np.abs(got - q * gap).max() < 1e-12

    def test_stride_one_when_scales_equal(self):
        rng = np.random.default_rng(53)
        p = TR.init_rt_params(rng, 4)
        q = Tensor(rng.standard_normal((1, 4, 6, 6)))
        kv = Tensor(rng.standard_normal((1, 4, 6, 6)))
        assert TR.rt_stride(6, 6) == 1
        assert TR.rendering_transformer(q, kv, p).shape == (1, 4, 6, 6)

    def test_stride_two_for_double_resolution(self):
        rng = np.random.default_rng(54)
        p = TR.init_rt_params(rng, 4)
        q = Tensor(rng.standard_normal((1, 4, 4, 4)))
        kv = Tensor(rng.standard_normal((1, 4, 8, 8)))
        assert TR.rt_stride(4, 8) == 2
        assert TR.rendering_transformer(q, kv, p).shape == (1, 4, 4, 4)

    def test_stride_four(self):
        rng = np.random.default_rng(55)
        p = TR.init_rt_params(rng, 2)
        q = Tensor(rng.standard_normal((1, 2, 2, 2)))
        kv = Tensor(rng.standard_normal((1, 2, 8, 8)))
        assert TR.rendering_transformer(q, kv, p).shape == (1, 2, 2, 2)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(56)
        p = TR.init_rt_params(rng, 4)
        with pytest.raises(ShapeError):
            TR.rendering_transformer(
                Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 3, 8, 8))), p
            )

    def test_non_integer_ratio_rejected(self):
        rng = np.random.default_rng(57)
        p = TR.init_rt_params(rng, 2)
        with pytest.raises(ShapeError):
            TR.rendering_transformer(
                Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 6, 6))), p
            )


class TestInitGuards:
    def test_st_indivisible_parts(self):
        with pytest.raises(ConfigError):
            TR.init_st_params(np.random.default_rng(0), 4, 5, 2)

    def test_gt_even_square(self):
        with pytest.raises(ConfigError):
            TR.init_gt_params(np.random.default_rng(0), 4, 4, 2, square_size=4)

    def test_kaiming_bound(self):
        rng = np.random.default_rng(58)
        p = TR.init_st_params(rng, 16, 8, 2)
        bound = np.sqrt(6.0 / 16)
        assert np.abs(p.proj.wq.data).max() <= bound
        assert not p.proj.bq.data.any()


def _proj_from(nd, pre):
    from fpt.attention import ProjectionParams

    return ProjectionParams(
        wq=nd[f"{pre}.wq"],
        bq=nd[f"{pre}.bq"],
        wk=nd[f"{pre}.wk"],
        bk=nd[f"{pre}.bk"],
        wv=nd[f"{pre}.wv"],
        bv=nd[f"{pre}.bv"],
    )


@pytest.mark.parametrize("kind", ["st", "gt", "lgt", "rt"])
def test_transformer_gradients_match_fd(kind):
    from fpt.attention import MosParams

    rng = np.random.default_rng(59)
    if kind == "st":
        p = TR.init_st_params(rng, 4, 4, 2)
        x = Tensor(rng.uniform(-1, 1, (1, 4, 3, 3)), requires_grad=True)
        named = {"x": x, **p.named("p")}

        def run(nd):
            pp = TR.StParams(_proj_from(nd, "p.proj"), MosParams(nd["p.mos.mixture"]))
            return TR.self_transformer(nd["x"], pp)

    elif kind in ("gt", "lgt"):
        square = 3 if kind == "lgt" else None
        p = TR.init_gt_params(rng, 4, 4, 2, square_size=square)
        xf = Tensor(rng.uniform(-1, 1, (1, 4, 4, 4)), requires_grad=True)
        xc = Tensor(rng.uniform(-1, 1, (1, 4, 2, 2)), requires_grad=True)
        named = {"xf": xf, "xc": xc, **p.named("p")}
        fwd = TR.locality_grounding_transformer if square else TR.grounding_transformer

        def run(nd):
            pp = TR.GtParams(
                _proj_from(nd, "p.proj"), MosParams(nd["p.mos.mixture"]), square_size=square
            )
            return fwd(nd["xf"], nd["xc"], pp)

    else:
        p = TR.init_rt_params(rng, 3)
        q = Tensor(rng.uniform(-1, 1, (1, 3, 2, 2)), requires_grad=True)
        kv = Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)), requires_grad=True)
        named = {"q": q, "kv": kv, **p.named("p")}

        def run(nd):
            pp = TR.RtParams(
                refine_w=nd["p.refine_w"],
                refine_b=nd["p.refine_b"],
                down_w=nd["p.down_w"],
                down_b=nd["p.down_b"],
                fuse_w=nd["p.fuse_w"],
                fuse_b=nd["p.fuse_b"],
            )
            return TR.rendering_transformer(nd["q"], nd["kv"], pp)

    def loss_of(nd):
        out = run(nd)
        return T.tsum(T.mul(out, out))

    g = backward(loss_of(named), params=list(named.values()))
    for name, t in named.items():
        fd = finite_diff_grad(lambda pt, _n=name: loss_of({**named, _n: pt}), t)
        a = g[t]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-3)
        assert (np.abs(a - fd) / denom).max() < 1e-5, name
