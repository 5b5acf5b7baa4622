#pragma once

#include <string>
#include <vector>

#include "changedet/metrics.hpp"
#include "changedet/png_io.hpp"
#include "changedet/tensor.hpp"

namespace cd {

struct SynthConfig {
    int height = 64, width = 64;
    int n_base_shapes = 6;
    int n_change_shapes = 2;
    double max_offset_px = 0.0;     // residual misregistration magnitude
    double brightness_jitter = 0.0;  // post-image shift drawn from U(-j, +j)
    double noise_sigma = 0.0;
    bool use_rectangles = true;
    bool use_ellipses = true;
    uint64_t seed = 0;
};

// One generated bi-temporal pair. Images are {H,W,3} in [0,1]; gt lives in
// the pre-image frame and is untouched by the nuisances.
struct SynthPair {
    Tensor pre, post;
    Mask gt;
};

// Deterministic given cfg.seed. Scene geometry (background, shapes, change
// ops) and nuisances (warp, brightness, noise) draw from split substreams of
// the seed, so gt depends only on the scene stream.
SynthPair generate_pair(const SynthConfig& cfg);

struct ManifestItem {
    std::string pre_path, post_path, label_path;
    std::string name;
};

struct DatasetManifest {
    std::string root;
    std::string split;
    std::vector<ManifestItem> items;
};

// Writes n pairs (seeds cfg.seed .. cfg.seed+n-1) as 8-bit PNGs under
// out_dir/{A,B,label}/pair_<k>.png and returns the manifest.
DatasetManifest generate_dataset(const SynthConfig& cfg, int n, const std::string& out_dir);

// Quantization used when writing pairs to disk: round(x*255), clamped.
ImageU8 to_u8_rgb(const Tensor& img01);
ImageU8 to_u8_label(const Mask& m);  // 0 / 255

}  // namespace cd
