#pragma once

#include <cstdint>

#include "changedet/backbone.hpp"
#include "changedet/decoder.hpp"
#include "changedet/interaction.hpp"
#include "changedet/params.hpp"

namespace cd {

struct ModelConfig {
    BackboneConfig backbone;
    InteractionConfig interaction;
    DecoderConfig decoder;
};

// Full pipeline: shared encoder on both temporal inputs, per-scale
// rectification + fusion, query decoder, log-sum-exp aggregation to dense
// 2-class logits on the stride-4 grid.
class Model {
  public:
    void build(const ModelConfig& cfg, uint64_t seed);

    struct Output {
        QuerySet queries;
        Var dense;  // {H/4, W/4, 2}
    };
    Output forward(const Var& pre, const Var& post) const;
    Output forward(const Tensor& pre, const Tensor& post) const;

    // forward + softmax + upsample + 0.5 threshold at the input resolution
    Mask predict(const Tensor& pre, const Tensor& post) const;

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    const Decoder& decoder() const { return decoder_; }

  private:
    ModelConfig cfg_;
    ParamStore store_;
    Backbone backbone_;
    Interaction interaction_;
    Decoder decoder_;
};

}  // namespace cd
