#pragma once

#include <array>
#include <vector>

#include "changedet/ops.hpp"
#include "changedet/params.hpp"

namespace cd {

struct BackboneConfig {
    std::array<int, 4> widths{96, 192, 384, 768};
    std::array<int, 4> depths{3, 3, 9, 3};
    int in_channels = 3;
    double ln_eps = 1e-6;
};

// Hierarchical encoder: patchify stem (4x4 stride-4 conv + norm), four stages
// of blocks (depthwise 7x7 -> channel norm -> pointwise expand 4x -> GELU ->
// pointwise project, residual), 2x downsample (norm + 2x2 stride-2 conv)
// between stages. Output strides 4/8/16/32. Both temporal branches run the
// same instance, so weight sharing is structural.
class Backbone {
  public:
    void build(const BackboneConfig& cfg, ParamStore& store, Rng& rng);
    // img {H,W,in_channels}; H, W divisible by 32.
    std::array<Var, 4> forward(const Var& img) const;

    const BackboneConfig& config() const { return cfg_; }

  private:
    struct Block {
        Var dw_w, dw_b, ln_g, ln_b, pw1_w, pw1_b, pw2_w, pw2_b;
    };
    struct Stage {
        Var down_ng, down_nb, down_w, down_b;  // empty for stage 0
        std::vector<Block> blocks;
    };

    Var run_block(const Block& b, const Var& x) const;

    BackboneConfig cfg_;
    Var stem_w, stem_b, stem_ng, stem_nb;
    std::array<Stage, 4> stages_;
};

}  // namespace cd
