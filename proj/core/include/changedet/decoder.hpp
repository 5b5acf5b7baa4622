#pragma once

#include <array>
#include <vector>

#include "changedet/metrics.hpp"
#include "changedet/ops.hpp"
#include "changedet/params.hpp"

namespace cd {

struct DecoderConfig {
    int num_queries = 8;
    int layers = 3;
    int embed_dim = 64;  // divisible by heads and by 4 (2D sinusoidal encoding)
    int heads = 4;
    double mask_threshold = 0.5;
    bool log_softmax_agg = false;  // aggregate log-softmax class scores instead of raw logits
    double ln_eps = 1e-6;
};

// Q query outputs: class logits over (bg, chg, no-object) and per-query soft
// mask logits on the stride-4 grid.
struct QuerySet {
    Var class_logits;  // {Q, 3}
    Var mask_logits;   // {Q, H/4, W/4}
};

// Pixel decoder (FPN laterals + top-down) and a query transformer with masked
// cross-attention, cycling through the three coarsest levels, followed by
// log-sum-exp aggregation of the query set into dense 2-class logits.
class Decoder {
  public:
    void build(const DecoderConfig& cfg, const std::array<int, 4>& widths, ParamStore& store,
               Rng& rng);

    struct PixelOut {
        Var per_pixel;               // {H/4, W/4, D}
        std::array<Var, 3> memory;   // token sequences {N_i, D}, strides 32, 16, 8
        std::array<std::array<int, 2>, 3> mem_hw;
    };
    PixelOut pixel_decode(const std::array<Var, 4>& pyramid) const;
    QuerySet transformer_decode(const PixelOut& px) const;
    QuerySet forward(const std::array<Var, 4>& pyramid) const;

    // dense[c] = log sum_q exp(p_q^c + m_q), stabilized by max subtraction;
    // the no-object column never participates.
    Var aggregate(const QuerySet& qs) const;

    // softmax over (bg, chg), bilinear-upsample the chg probability to
    // (out_h, out_w), then threshold at 0.5; exact ties resolve to bg.
    static Mask predict_mask(const Tensor& dense, int out_h, int out_w);

    // Fixed 2D sinusoidal position encoding, {h*w, dim}.
    static Tensor sin_pos_enc(int h, int w, int dim);

    const DecoderConfig& config() const { return cfg_; }

  private:
    struct Attn {
        Var q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b, ln_g, ln_b;
    };
    struct Layer {
        Attn cross, self;
        Var ffn1_w, ffn1_b, ffn2_w, ffn2_b, ffn_ln_g, ffn_ln_b;
    };

    Var mha(const Attn& p, const Var& q_in, const Var& k_in, const Var& v_in,
            const Var& add_mask) const;  // add_mask {Nq,Nk} or null
    Var mask_head(const Var& queries, const Var& ppe_flat, int h4, int w4) const;
    Tensor attn_mask_from(const Tensor& mask_logits, int lh, int lw, int n_tokens) const;

    DecoderConfig cfg_;
    std::array<Var, 4> lat_w_, lat_b_;
    Var level_embed_;              // {3, D}
    Var query_feat_, query_pos_;   // {Q, D}
    std::vector<Layer> layers_;
    Var dec_ln_g, dec_ln_b;
    Var mask1_w, mask1_b, mask2_w, mask2_b, mask3_w, mask3_b;
    Var class_w, class_b;
};

}  // namespace cd
