#pragma once

#include <array>
#include <string>
#include <utility>

#include "changedet/ops.hpp"
#include "changedet/params.hpp"

namespace cd {

struct InteractionConfig {
    std::string core = "deform";     // "deform" | "cross"
    int heads = 4;
    int points = 4;                  // sampling points per head (deform)
    double offset_init_scale = 0.0;  // >0: trunc-normal std for the offset predictor weights
};

// Per-scale bi-temporal interaction. Rectification adds gated content from
// the opposite stream: f1_hat = f1 + lambda_c*(gc(f2,f1) .* f2) +
// lambda_s*(gs(f2,f1) .* f2), symmetrically for f2_hat, with one shared gate
// network evaluated twice (swapped arguments) so identical inputs rectify
// identically under any parameters. lambda_c, lambda_s start at 0, making
// rectification the identity at init. Fusion attends both directions with a
// shared per-scale core and projects the concatenation back to C, plus the
// mean of the rectified streams as a residual.
class Interaction {
  public:
    void build(const InteractionConfig& cfg, const std::array<int, 4>& widths, ParamStore& store,
               Rng& rng);

    std::pair<Var, Var> rectify(int scale, const Var& f1, const Var& f2) const;
    Var attend(int scale, const Var& q, const Var& v) const;  // the configured core
    Var fuse(int scale, const Var& f1_hat, const Var& f2_hat) const;

    std::array<Var, 4> forward(const std::array<Var, 4>& pyr1,
                               const std::array<Var, 4>& pyr2) const;

    const InteractionConfig& config() const { return cfg_; }

  private:
    struct ScaleParams {
        // rectification gate network
        Var ch_fc1_w, ch_fc1_b, ch_fc2_w, ch_fc2_b;
        Var sp_c1_w, sp_c1_b, sp_c2_w, sp_c2_b;
        Var lambda_c, lambda_s;
        // attention core (deform uses value/offset/attn/out; cross uses q/k/v/out)
        Var value_w, value_b, offset_w, offset_b, attn_w, attn_b;
        Var q_w, q_b, k_w, k_b, v_w, v_b;
        Var out_w, out_b;
        // fusion projection
        Var fuse_w, fuse_b;
    };

    // gate of `self` conditioned on the opposite stream
    std::pair<Var, Var> gates(const ScaleParams& sp, const Var& self, const Var& other) const;
    Var attend_deform(const ScaleParams& sp, const Var& q, const Var& v) const;
    Var attend_cross(const ScaleParams& sp, const Var& q, const Var& v) const;

    InteractionConfig cfg_;
    std::array<int, 4> widths_{};
    std::array<ScaleParams, 4> scales_;
};

}  // namespace cd
