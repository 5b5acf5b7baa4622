#include "changedet/decoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cd {

namespace o = ops;

namespace {

Tensor trunc_init(Rng& rng, Shape s, double sigma = 0.02) {
    Tensor t(std::move(s));
    for (double& x : t.v) x = rng.trunc_normal(sigma);
    return t;
}

constexpr double kMaskedOut = -1e30;

}  // namespace

void Decoder::build(const DecoderConfig& cfg, const std::array<int, 4>& widths,
                    ParamStore& store, Rng& rng) {
    cfg_ = cfg;
    const int D = cfg.embed_dim;
    if (D % cfg.heads != 0)
        throw std::invalid_argument("decoder: embed_dim not divisible by heads");
    if (D % 4 != 0) throw std::invalid_argument("decoder: embed_dim must be divisible by 4");
    if (cfg.num_queries < 1 || cfg.layers < 1)
        throw std::invalid_argument("decoder: queries and layers must be >= 1");
    const std::string p = "decoder.";
    for (int i = 0; i < 4; ++i) {
        lat_w_[static_cast<size_t>(i)] = store.add(
            p + "lat" + std::to_string(i) + ".w", trunc_init(rng, {widths[static_cast<size_t>(i)], D}));
        lat_b_[static_cast<size_t>(i)] =
            store.add(p + "lat" + std::to_string(i) + ".b", Tensor::zeros({D}));
    }
    level_embed_ = store.add(p + "level_embed", trunc_init(rng, {3, D}));
    query_feat_ = store.add(p + "query_feat", trunc_init(rng, {cfg.num_queries, D}));
    query_pos_ = store.add(p + "query_pos", trunc_init(rng, {cfg.num_queries, D}));
    auto make_attn = [&](const std::string& ap) {
        Attn a;
        a.q_w = store.add(ap + "q.w", trunc_init(rng, {D, D}));
        a.q_b = store.add(ap + "q.b", Tensor::zeros({D}));
        a.k_w = store.add(ap + "k.w", trunc_init(rng, {D, D}));
        a.k_b = store.add(ap + "k.b", Tensor::zeros({D}));
        a.v_w = store.add(ap + "v.w", trunc_init(rng, {D, D}));
        a.v_b = store.add(ap + "v.b", Tensor::zeros({D}));
        a.out_w = store.add(ap + "out.w", trunc_init(rng, {D, D}));
        a.out_b = store.add(ap + "out.b", Tensor::zeros({D}));
        a.ln_g = store.add(ap + "norm.g", Tensor::full({D}, 1.0));
        a.ln_b = store.add(ap + "norm.b", Tensor::zeros({D}));
        return a;
    };
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string lp = p + "layer" + std::to_string(l) + ".";
        Layer layer;
        layer.cross = make_attn(lp + "cross.");
        layer.self = make_attn(lp + "self.");
        layer.ffn1_w = store.add(lp + "ffn.fc1.w", trunc_init(rng, {D, 4 * D}));
        layer.ffn1_b = store.add(lp + "ffn.fc1.b", Tensor::zeros({4 * D}));
        layer.ffn2_w = store.add(lp + "ffn.fc2.w", trunc_init(rng, {4 * D, D}));
        layer.ffn2_b = store.add(lp + "ffn.fc2.b", Tensor::zeros({D}));
        layer.ffn_ln_g = store.add(lp + "ffn.norm.g", Tensor::full({D}, 1.0));
        layer.ffn_ln_b = store.add(lp + "ffn.norm.b", Tensor::zeros({D}));
        layers_.push_back(std::move(layer));
    }
    dec_ln_g = store.add(p + "norm.g", Tensor::full({D}, 1.0));
    dec_ln_b = store.add(p + "norm.b", Tensor::zeros({D}));
    mask1_w = store.add(p + "mask.fc1.w", trunc_init(rng, {D, D}));
    mask1_b = store.add(p + "mask.fc1.b", Tensor::zeros({D}));
    mask2_w = store.add(p + "mask.fc2.w", trunc_init(rng, {D, D}));
    mask2_b = store.add(p + "mask.fc2.b", Tensor::zeros({D}));
    mask3_w = store.add(p + "mask.fc3.w", trunc_init(rng, {D, D}));
    mask3_b = store.add(p + "mask.fc3.b", Tensor::zeros({D}));
    class_w = store.add(p + "class.w", trunc_init(rng, {D, 3}));
    class_b = store.add(p + "class.b", Tensor::zeros({3}));
}

Tensor Decoder::sin_pos_enc(int h, int w, int dim) {
    // Half the channels encode y, half x; each half holds sin/cos pairs over a
    // geometric frequency ladder. Positions are normalized to one period.
    const int half = dim / 2;
    Tensor pe({h * w, dim});
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int pos = y * w + x;
            const double yn = (y + 0.5) / h * two_pi;
            const double xn = (x + 0.5) / w * two_pi;
            for (int i = 0; i < half / 2; ++i) {
                const double freq = std::pow(10000.0, -2.0 * i / half);
                pe.at2(pos, 2 * i) = std::sin(yn * freq);
                pe.at2(pos, 2 * i + 1) = std::cos(yn * freq);
                pe.at2(pos, half + 2 * i) = std::sin(xn * freq);
                pe.at2(pos, half + 2 * i + 1) = std::cos(xn * freq);
            }
        }
    return pe;
}

Decoder::PixelOut Decoder::pixel_decode(const std::array<Var, 4>& pyramid) const {
    const int D = cfg_.embed_dim;
    std::array<Var, 4> lat;
    for (int i = 0; i < 4; ++i) {
        const Var& f = pyramid[static_cast<size_t>(i)];
        const int h = f->shape()[0], w = f->shape()[1], c = f->shape()[2];
        lat[static_cast<size_t>(i)] = o::reshape(
            o::linear(o::reshape(f, {h * w, c}), lat_w_[static_cast<size_t>(i)],
                      lat_b_[static_cast<size_t>(i)]),
            {h, w, D});
    }
    std::array<Var, 4> fused;
    fused[3] = lat[3];
    for (int i = 2; i >= 0; --i)
        fused[static_cast<size_t>(i)] =
            o::add(lat[static_cast<size_t>(i)], o::upsample_nearest2x(fused[static_cast<size_t>(i + 1)]));
    PixelOut out;
    out.per_pixel = fused[0];
    for (int k = 0; k < 3; ++k) {
        const Var& f = fused[static_cast<size_t>(3 - k)];  // strides 32, 16, 8
        const int h = f->shape()[0], w = f->shape()[1];
        Var tokens = o::reshape(f, {h * w, D});
        tokens = o::add_rowvec(tokens, o::slice_rows(level_embed_, k, 1));
        tokens = o::add(tokens, constant(sin_pos_enc(h, w, D)));
        out.memory[static_cast<size_t>(k)] = tokens;
        out.mem_hw[static_cast<size_t>(k)] = {h, w};
    }
    return out;
}

Var Decoder::mha(const Attn& p, const Var& q_in, const Var& k_in, const Var& v_in,
                 const Var& add_mask) const {
    const int D = cfg_.embed_dim, M = cfg_.heads, hd = D / M;
    const int nq = q_in->shape()[0], nk = k_in->shape()[0];
    Var qf = o::linear(q_in, p.q_w, p.q_b);
    Var kf = o::linear(k_in, p.k_w, p.k_b);
    Var vf = o::linear(v_in, p.v_w, p.v_b);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> heads;
    for (int m = 0; m < M; ++m) {
        Var qh = o::smul(o::slice_cols(qf, m * hd, hd), scale);
        Var kh = o::slice_cols(kf, m * hd, hd);
        Var vh = o::slice_cols(vf, m * hd, hd);
        Var logits = o::matmul_nt(qh, kh);  // {nq, nk}
        if (add_mask) logits = o::add(logits, add_mask);
        heads.push_back(o::matmul(o::softmax_lastdim(logits), vh));
    }
    Var cat = M == 1 ? heads[0] : o::concat_lastdim(heads);
    (void)nq;
    (void)nk;
    return o::linear(cat, p.out_w, p.out_b);
}

Var Decoder::mask_head(const Var& queries, const Var& ppe_flat, int h4, int w4) const {
    Var x = o::layernorm_lastdim(queries, dec_ln_g, dec_ln_b, cfg_.ln_eps);
    x = o::relu(o::linear(x, mask1_w, mask1_b));
    x = o::relu(o::linear(x, mask2_w, mask2_b));
    x = o::linear(x, mask3_w, mask3_b);                    // {Q, D} mask embeddings
    return o::reshape(o::matmul_nt(x, ppe_flat), {cfg_.num_queries, h4, w4});
}

Tensor Decoder::attn_mask_from(const Tensor& mask_logits, int lh, int lw, int n_tokens) const {
    const int Q = mask_logits.shape[0], h4 = mask_logits.shape[1], w4 = mask_logits.shape[2];
    // transpose to {h4, w4, Q} so the shared resize helper applies
    Tensor t({h4, w4, Q});
    for (int q = 0; q < Q; ++q)
        for (int y = 0; y < h4; ++y)
            for (int x = 0; x < w4; ++x)
                t.at3(y, x, q) = mask_logits[(static_cast<int64_t>(q) * h4 + y) * w4 + x];
    Tensor r = o::bilinear_resize(t, lh, lw);
    // sigmoid(v) > threshold  <=>  v > logit(threshold)
    const double cut = std::log(cfg_.mask_threshold / (1.0 - cfg_.mask_threshold));
    Tensor mask({Q, n_tokens});
    for (int q = 0; q < Q; ++q) {
        bool any = false;
        for (int j = 0; j < n_tokens; ++j) {
            const bool admit = r[static_cast<int64_t>(j) * Q + q] > cut;
            mask.at2(q, j) = admit ? 0.0 : kMaskedOut;
            any = any || admit;
        }
        if (!any)
            for (int j = 0; j < n_tokens; ++j) mask.at2(q, j) = 0.0;  // fall back to everything
    }
    return mask;
}

QuerySet Decoder::transformer_decode(const PixelOut& px) const {
    const int h4 = px.per_pixel->shape()[0], w4 = px.per_pixel->shape()[1];
    const int D = cfg_.embed_dim;
    Var ppe_flat = o::reshape(px.per_pixel, {h4 * w4, D});
    Var x = query_feat_;
    Var masks = mask_head(x, ppe_flat, h4, w4);  // round-0 predictions
    for (int l = 0; l < cfg_.layers; ++l) {
        const Layer& ly = layers_[static_cast<size_t>(l)];
        const int lev = l % 3;
        const Var& mem = px.memory[static_cast<size_t>(lev)];
        const auto [lh, lw] = px.mem_hw[static_cast<size_t>(lev)];
        // masked cross-attention; the mask derives from the previous round's
        // predictions and is held constant under differentiation
        Var amask = constant(attn_mask_from(masks->val, lh, lw, mem->shape()[0]));
        Var q_in = o::add(x, query_pos_);
        Var att = mha(ly.cross, q_in, mem, mem, amask);
        x = o::layernorm_lastdim(o::add(x, att), ly.cross.ln_g, ly.cross.ln_b, cfg_.ln_eps);
        // self-attention among queries
        q_in = o::add(x, query_pos_);
        att = mha(ly.self, q_in, q_in, x, nullptr);
        x = o::layernorm_lastdim(o::add(x, att), ly.self.ln_g, ly.self.ln_b, cfg_.ln_eps);
        // feed-forward
        Var f = o::linear(o::relu(o::linear(x, ly.ffn1_w, ly.ffn1_b)), ly.ffn2_w, ly.ffn2_b);
        x = o::layernorm_lastdim(o::add(x, f), ly.ffn_ln_g, ly.ffn_ln_b, cfg_.ln_eps);
        masks = mask_head(x, ppe_flat, h4, w4);
    }
    QuerySet qs;
    qs.mask_logits = masks;
    Var xn = o::layernorm_lastdim(x, dec_ln_g, dec_ln_b, cfg_.ln_eps);
    qs.class_logits = o::linear(xn, class_w, class_b);
    return qs;
}

QuerySet Decoder::forward(const std::array<Var, 4>& pyramid) const {
    return transformer_decode(pixel_decode(pyramid));
}

Var Decoder::aggregate(const QuerySet& qs) const {
    Var p = cfg_.log_softmax_agg
                ? o::slice_cols(o::vlog(o::softmax_lastdim(qs.class_logits)), 0, 2)
                : o::slice_cols(qs.class_logits, 0, 2);
    return o::aggregate_lse_op(p, qs.mask_logits);
}

Mask Decoder::predict_mask(const Tensor& dense, int out_h, int out_w) {
    const int h = dense.shape[0], w = dense.shape[1];
    Tensor prob({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double b = dense.at3(y, x, 0), c = dense.at3(y, x, 1);
            const double m = std::max(b, c);
            const double eb = std::exp(b - m), ec = std::exp(c - m);
            prob.at3(y, x, 0) = ec / (eb + ec);
        }
    Tensor up = o::bilinear_resize(prob, out_h, out_w);
    Mask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) out.at(y, x) = up.at3(y, x, 0) > 0.5 ? 1 : 0;
    return out;
}

}  // namespace cd
