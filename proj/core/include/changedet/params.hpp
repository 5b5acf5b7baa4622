#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "changedet/tensor.hpp"

namespace cd {

// Ordered registry of trainable leaf tensors. Values live on the float32 grid
// (snapped after init and after every optimizer step) so checkpoints written
// as float32 round-trip bitwise.
struct ParamStore {
    std::vector<std::string> names;  // registration order
    std::unordered_map<std::string, Var> by_name;

    Var add(const std::string& name, Tensor init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const { return by_name.count(name) != 0; }
    int64_t total_params() const;
    void zero_grad();
};

struct NamedTensor {
    std::string name;
    Tensor t;
};

// Single-file archive: 8-byte magic "CDCKPT01", u32 header length, JSON header
// bytes, u32 tensor count, then per tensor: u16 name length, name, u8 ndim,
// u32 dims[ndim], u64 payload bytes, row-major float32 little-endian data.
void save_checkpoint(const std::string& path, const std::string& header_json,
                     const std::vector<NamedTensor>& tensors);
std::string load_checkpoint(const std::string& path, std::vector<NamedTensor>& tensors);

// Name-keyed partial load. Returns matched tensor count. Tensors in `loaded`
// without a matching parameter produce a warning; a name match with a shape
// mismatch throws, naming the tensor and both shapes.
int apply_tensors(ParamStore& store, const std::vector<NamedTensor>& loaded,
                  std::vector<std::string>* warnings = nullptr);

// AdamW with decoupled weight decay. Parameters whose names start with
// "backbone." form the encoder group: their learning rate is scaled by
// encoder_lr_mult, and while frozen the whole group is skipped (no moment or
// step-count updates). Moments are snapped to float32 after each step so a
// saved+resumed run is bitwise identical to an uninterrupted one.
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    double encoder_lr_mult = 0.1;

    std::vector<Tensor> m, v;  // indexed like store.names
    int64_t step_main = 0, step_encoder = 0;

    void init(const ParamStore& store);
    void step(ParamStore& store, double lr, bool freeze_encoder);

    void export_state(const ParamStore& store, std::vector<NamedTensor>& out) const;
    // Restores moments/counters from "adam."-prefixed tensors; returns how many matched.
    int import_state(const ParamStore& store, const std::vector<NamedTensor>& loaded);
};

}  // namespace cd
