#include "changedet/interaction.hpp"

#include <cmath>
#include <stdexcept>

namespace cd {

namespace o = ops;

namespace {

Tensor trunc_init(Rng& rng, Shape s, double sigma = 0.02) {
    Tensor t(std::move(s));
    if (sigma > 0.0)
        for (double& x : t.v) x = rng.trunc_normal(sigma);
    return t;
}

}  // namespace

void Interaction::build(const InteractionConfig& cfg, const std::array<int, 4>& widths,
                        ParamStore& store, Rng& rng) {
    cfg_ = cfg;
    widths_ = widths;
    if (cfg.core != "deform" && cfg.core != "cross")
        throw std::invalid_argument("interaction: unknown core '" + cfg.core + "'");
    if (cfg.heads < 1 || cfg.points < 1)
        throw std::invalid_argument("interaction: heads and points must be >= 1");
    for (int i = 0; i < 4; ++i) {
        const int c = widths[static_cast<size_t>(i)];
        if (c % cfg.heads != 0)
            throw std::invalid_argument("interaction: width " + std::to_string(c) +
                                        " not divisible by heads " + std::to_string(cfg.heads));
        ScaleParams& sp = scales_[static_cast<size_t>(i)];
        const std::string p = "interaction.s" + std::to_string(i) + ".";
        const int hid = std::max(c / 2, 4);
        sp.ch_fc1_w = store.add(p + "frm.ch.fc1.w", trunc_init(rng, {2 * c, hid}));
        sp.ch_fc1_b = store.add(p + "frm.ch.fc1.b", Tensor::zeros({hid}));
        sp.ch_fc2_w = store.add(p + "frm.ch.fc2.w", trunc_init(rng, {hid, c}));
        sp.ch_fc2_b = store.add(p + "frm.ch.fc2.b", Tensor::zeros({c}));
        sp.sp_c1_w = store.add(p + "frm.sp.c1.w", trunc_init(rng, {3, 3, 2 * c, c}));
        sp.sp_c1_b = store.add(p + "frm.sp.c1.b", Tensor::zeros({c}));
        sp.sp_c2_w = store.add(p + "frm.sp.c2.w", trunc_init(rng, {3, 3, c, 1}));
        sp.sp_c2_b = store.add(p + "frm.sp.c2.b", Tensor::zeros({1}));
        sp.lambda_c = store.add(p + "frm.lambda_c", Tensor::zeros({1}));
        sp.lambda_s = store.add(p + "frm.lambda_s", Tensor::zeros({1}));
        if (cfg.core == "deform") {
            const int mk = cfg.heads * cfg.points;
            sp.value_w = store.add(p + "core.value.w", trunc_init(rng, {c, c}));
            sp.value_b = store.add(p + "core.value.b", Tensor::zeros({c}));
            // Zero-init offsets and logits: at init every head samples its own
            // pixel with uniform point weights (the degenerate-reduction case).
            sp.offset_w = store.add(p + "core.offset.w",
                                    trunc_init(rng, {c, mk * 2}, cfg.offset_init_scale));
            sp.offset_b = store.add(p + "core.offset.b", Tensor::zeros({mk * 2}));
            sp.attn_w = store.add(p + "core.attn.w", Tensor::zeros({c, mk}));
            sp.attn_b = store.add(p + "core.attn.b", Tensor::zeros({mk}));
        } else {
            sp.q_w = store.add(p + "core.q.w", trunc_init(rng, {c, c}));
            sp.q_b = store.add(p + "core.q.b", Tensor::zeros({c}));
            sp.k_w = store.add(p + "core.k.w", trunc_init(rng, {c, c}));
            sp.k_b = store.add(p + "core.k.b", Tensor::zeros({c}));
            sp.v_w = store.add(p + "core.v.w", trunc_init(rng, {c, c}));
            sp.v_b = store.add(p + "core.v.b", Tensor::zeros({c}));
        }
        sp.out_w = store.add(p + "core.out.w", trunc_init(rng, {c, c}));
        sp.out_b = store.add(p + "core.out.b", Tensor::zeros({c}));
        sp.fuse_w = store.add(p + "fuse.w", trunc_init(rng, {2 * c, c}));
        sp.fuse_b = store.add(p + "fuse.b", Tensor::zeros({c}));
    }
}

std::pair<Var, Var> Interaction::gates(const ScaleParams& sp, const Var& self,
                                       const Var& other) const {
    const int h = self->shape()[0], w = self->shape()[1], c = self->shape()[2];
    Var cat = o::concat_c(self, other);
    Var ga = o::reshape(o::global_avgpool(cat), {1, 2 * c});
    Var gm = o::reshape(o::global_maxpool(cat), {1, 2 * c});
    Var a = o::linear(o::relu(o::linear(ga, sp.ch_fc1_w, sp.ch_fc1_b)), sp.ch_fc2_w, sp.ch_fc2_b);
    Var m = o::linear(o::relu(o::linear(gm, sp.ch_fc1_w, sp.ch_fc1_b)), sp.ch_fc2_w, sp.ch_fc2_b);
    Var gate_c = o::reshape(o::sigmoid(o::add(a, m)), {c});
    Var s = o::relu(o::conv2d(cat, sp.sp_c1_w, sp.sp_c1_b, 1, 1, 1));
    s = o::sigmoid(o::conv2d(s, sp.sp_c2_w, sp.sp_c2_b, 1, 1, 1));
    Var gate_s = o::reshape(s, {h, w});
    return {gate_c, gate_s};
}

std::pair<Var, Var> Interaction::rectify(int scale, const Var& f1, const Var& f2) const {
    if (!same_shape(f1->shape(), f2->shape()))
        throw std::invalid_argument("rectify: stream shapes differ");
    const ScaleParams& sp = scales_[static_cast<size_t>(scale)];
    auto [g2c, g2s] = gates(sp, f2, f1);
    auto [g1c, g1s] = gates(sp, f1, f2);
    Var f1h = o::add(f1, o::add(o::scale_by(o::mul_channel(f2, g2c), sp.lambda_c),
                                o::scale_by(o::mul_spatial(f2, g2s), sp.lambda_s)));
    Var f2h = o::add(f2, o::add(o::scale_by(o::mul_channel(f1, g1c), sp.lambda_c),
                                o::scale_by(o::mul_spatial(f1, g1s), sp.lambda_s)));
    return {f1h, f2h};
}

Var Interaction::attend_deform(const ScaleParams& sp, const Var& q, const Var& v) const {
    const int h = q->shape()[0], w = q->shape()[1], c = q->shape()[2];
    const int M = cfg_.heads, K = cfg_.points, hd = c / M;
    const int n = h * w;
    Var qf = o::reshape(q, {n, c});
    Var off = o::linear(qf, sp.offset_w, sp.offset_b);    // {n, M*K*2}
    Var logits = o::linear(qf, sp.attn_w, sp.attn_b);     // {n, M*K}
    Var vmap = o::reshape(o::linear(o::reshape(v, {n, c}), sp.value_w, sp.value_b), {h, w, c});
    Tensor ref({n, 2});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            ref.at2(y * w + x, 0) = y;
            ref.at2(y * w + x, 1) = x;
        }
    Var refs = constant(std::move(ref));
    std::vector<Var> heads;
    for (int m = 0; m < M; ++m) {
        Var am = o::softmax_lastdim(o::slice_cols(logits, m * K, K));  // {n, K}
        Var acc;
        for (int k = 0; k < K; ++k) {
            Var pts = o::add(refs, o::slice_cols(off, (m * K + k) * 2, 2));
            Var s = o::bilinear_sample(vmap, pts, m * hd, hd);  // {n, hd}
            Var wk = o::mul_spatial(o::reshape(s, {n, 1, hd}),
                                    o::reshape(o::slice_cols(am, k, 1), {n, 1}));
            acc = k == 0 ? wk : o::add(acc, wk);
        }
        heads.push_back(o::reshape(acc, {n, hd}));
    }
    Var cat = M == 1 ? heads[0] : o::concat_lastdim(heads);
    return o::reshape(o::linear(cat, sp.out_w, sp.out_b), {h, w, c});
}

Var Interaction::attend_cross(const ScaleParams& sp, const Var& q, const Var& v) const {
    const int h = q->shape()[0], w = q->shape()[1], c = q->shape()[2];
    const int M = cfg_.heads, hd = c / M;
    const int n = h * w, nv = v->shape()[0] * v->shape()[1];
    Var qf = o::linear(o::reshape(q, {n, c}), sp.q_w, sp.q_b);
    Var kf = o::linear(o::reshape(v, {nv, c}), sp.k_w, sp.k_b);
    Var vf = o::linear(o::reshape(v, {nv, c}), sp.v_w, sp.v_b);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> heads;
    for (int m = 0; m < M; ++m) {
        Var qh = o::smul(o::slice_cols(qf, m * hd, hd), scale);
        Var kh = o::slice_cols(kf, m * hd, hd);
        Var vh = o::slice_cols(vf, m * hd, hd);
        Var attn = o::softmax_lastdim(o::matmul_nt(qh, kh));
        heads.push_back(o::matmul(attn, vh));
    }
    Var cat = M == 1 ? heads[0] : o::concat_lastdim(heads);
    return o::reshape(o::linear(cat, sp.out_w, sp.out_b), {h, w, c});
}

Var Interaction::attend(int scale, const Var& q, const Var& v) const {
    if (!same_shape(q->shape(), v->shape()))
        throw std::invalid_argument("attend: query/value shapes differ");
    const ScaleParams& sp = scales_[static_cast<size_t>(scale)];
    return cfg_.core == "deform" ? attend_deform(sp, q, v) : attend_cross(sp, q, v);
}

Var Interaction::fuse(int scale, const Var& f1_hat, const Var& f2_hat) const {
    const ScaleParams& sp = scales_[static_cast<size_t>(scale)];
    const int h = f1_hat->shape()[0], w = f1_hat->shape()[1], c = f1_hat->shape()[2];
    Var a12 = attend(scale, f1_hat, f2_hat);
    Var a21 = attend(scale, f2_hat, f1_hat);
    Var cat = o::reshape(o::concat_c(a12, a21), {h * w, 2 * c});
    Var z = o::reshape(o::linear(cat, sp.fuse_w, sp.fuse_b), {h, w, c});
    return o::add(z, o::smul(o::add(f1_hat, f2_hat), 0.5));
}

std::array<Var, 4> Interaction::forward(const std::array<Var, 4>& pyr1,
                                        const std::array<Var, 4>& pyr2) const {
    std::array<Var, 4> out;
    for (int i = 0; i < 4; ++i) {
        auto [f1h, f2h] = rectify(i, pyr1[static_cast<size_t>(i)], pyr2[static_cast<size_t>(i)]);
        out[static_cast<size_t>(i)] = fuse(i, f1h, f2h);
    }
    return out;
}

}  // namespace cd
