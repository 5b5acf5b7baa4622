#include "changedet/backbone.hpp"

#include <stdexcept>
#include <string>

namespace cd {

namespace {

Tensor trunc_init(Rng& rng, Shape s, double sigma = 0.02) {
    Tensor t(std::move(s));
    for (double& x : t.v) x = rng.trunc_normal(sigma);
    return t;
}

}  // namespace

void Backbone::build(const BackboneConfig& cfg, ParamStore& store, Rng& rng) {
    for (int i = 0; i < 4; ++i) {
        const std::string field = "[" + std::to_string(i) + "]";
        if (cfg.depths[static_cast<size_t>(i)] < 1)
            throw std::invalid_argument("stage_depths" + field + " must be >= 1");
        if (cfg.widths[static_cast<size_t>(i)] < 4)
            throw std::invalid_argument("stage_widths" + field + " must be >= 4");
        if (cfg.widths[static_cast<size_t>(i)] % 2 != 0)
            throw std::invalid_argument("stage_widths" + field + " must be even");
    }
    if (cfg.in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");
    cfg_ = cfg;
    const std::string p = "backbone.";
    stem_w = store.add(p + "stem.conv.w", trunc_init(rng, {4, 4, cfg.in_channels, cfg.widths[0]}));
    stem_b = store.add(p + "stem.conv.b", Tensor::zeros({cfg.widths[0]}));
    stem_ng = store.add(p + "stem.norm.g", Tensor::full({cfg.widths[0]}, 1.0));
    stem_nb = store.add(p + "stem.norm.b", Tensor::zeros({cfg.widths[0]}));
    for (int i = 0; i < 4; ++i) {
        const int c = cfg.widths[static_cast<size_t>(i)];
        Stage& st = stages_[static_cast<size_t>(i)];
        const std::string sp = p + "s" + std::to_string(i) + ".";
        if (i > 0) {
            const int cprev = cfg.widths[static_cast<size_t>(i - 1)];
            st.down_ng = store.add(sp + "down.norm.g", Tensor::full({cprev}, 1.0));
            st.down_nb = store.add(sp + "down.norm.b", Tensor::zeros({cprev}));
            st.down_w = store.add(sp + "down.conv.w", trunc_init(rng, {2, 2, cprev, c}));
            st.down_b = store.add(sp + "down.conv.b", Tensor::zeros({c}));
        }
        for (int j = 0; j < cfg.depths[static_cast<size_t>(i)]; ++j) {
            const std::string bp = sp + "b" + std::to_string(j) + ".";
            Block b;
            b.dw_w = store.add(bp + "dw.w", trunc_init(rng, {7, 7, 1, c}));
            b.dw_b = store.add(bp + "dw.b", Tensor::zeros({c}));
            b.ln_g = store.add(bp + "norm.g", Tensor::full({c}, 1.0));
            b.ln_b = store.add(bp + "norm.b", Tensor::zeros({c}));
            b.pw1_w = store.add(bp + "pw1.w", trunc_init(rng, {c, 4 * c}));
            b.pw1_b = store.add(bp + "pw1.b", Tensor::zeros({4 * c}));
            b.pw2_w = store.add(bp + "pw2.w", trunc_init(rng, {4 * c, c}));
            b.pw2_b = store.add(bp + "pw2.b", Tensor::zeros({c}));
            st.blocks.push_back(std::move(b));
        }
    }
}

Var Backbone::run_block(const Block& b, const Var& x) const {
    const int h = x->shape()[0], w = x->shape()[1], c = x->shape()[2];
    Var y = ops::conv2d(x, b.dw_w, b.dw_b, 1, 3, c);  // depthwise 7x7
    y = ops::layernorm_lastdim(y, b.ln_g, b.ln_b, cfg_.ln_eps);
    y = ops::reshape(y, {h * w, c});
    y = ops::linear(y, b.pw1_w, b.pw1_b);
    y = ops::gelu(y);
    y = ops::linear(y, b.pw2_w, b.pw2_b);
    y = ops::reshape(y, {h, w, c});
    return ops::add(x, y);
}

std::array<Var, 4> Backbone::forward(const Var& img) const {
    const int H = img->shape()[0], W = img->shape()[1];
    if (H % 32 != 0 || W % 32 != 0)
        throw std::invalid_argument("backbone: input size must be divisible by 32, got " +
                                    shape_str(img->shape()));
    Var x = ops::conv2d(img, stem_w, stem_b, 4, 0, 1);
    x = ops::layernorm_lastdim(x, stem_ng, stem_nb, cfg_.ln_eps);
    std::array<Var, 4> out;
    for (int i = 0; i < 4; ++i) {
        const Stage& st = stages_[static_cast<size_t>(i)];
        if (i > 0) {
            x = ops::layernorm_lastdim(x, st.down_ng, st.down_nb, cfg_.ln_eps);
            x = ops::conv2d(x, st.down_w, st.down_b, 2, 0, 1);
        }
        for (const Block& b : st.blocks) x = run_block(b, x);
        out[static_cast<size_t>(i)] = x;
    }
    return out;
}

}  // namespace cd
