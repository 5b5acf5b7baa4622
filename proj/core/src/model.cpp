#include "changedet/model.hpp"

namespace cd {

void Model::build(const ModelConfig& cfg, uint64_t seed) {
    cfg_ = cfg;
    store_ = ParamStore{};
    Rng rng(seed);
    backbone_.build(cfg.backbone, store_, rng);
    interaction_.build(cfg.interaction, cfg.backbone.widths, store_, rng);
    decoder_.build(cfg.decoder, cfg.backbone.widths, store_, rng);
}

Model::Output Model::forward(const Var& pre, const Var& post) const {
    auto pyr1 = backbone_.forward(pre);
    auto pyr2 = backbone_.forward(post);
    auto fused = interaction_.forward(pyr1, pyr2);
    Output out;
    out.queries = decoder_.forward(fused);
    out.dense = decoder_.aggregate(out.queries);
    return out;
}

Model::Output Model::forward(const Tensor& pre, const Tensor& post) const {
    return forward(constant(pre), constant(post));
}

Mask Model::predict(const Tensor& pre, const Tensor& post) const {
    if (pre.shape.size() != 3 || post.shape.size() != 3)
        throw std::invalid_argument("predict: inputs must be {H,W,C}");
    Output out = forward(pre, post);
    return Decoder::predict_mask(out.dense->val, pre.shape[0], pre.shape[1]);
}

}  // namespace cd
