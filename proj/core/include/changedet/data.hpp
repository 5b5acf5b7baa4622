#pragma once

#include <string>
#include <vector>

#include "changedet/synth.hpp"

namespace cd {

struct LoadedPair {
    Tensor pre, post;  // {H,W,3} in [0,1]
    Mask gt;
    std::string name;
};

// Expects root/{split}/{A,B,label}/<name>.png with matching filenames.
// Labels binarize at >127. strict_256 enforces the public-dataset tile size.
DatasetManifest load_manifest(const std::string& root, const std::string& split,
                              bool strict_256 = false);
LoadedPair load_pair(const ManifestItem& item, bool strict_256 = false);

// Dihedral-group augmentation id in [0,8): bit 2 = horizontal flip (applied
// first), bits 0..1 = number of 90-degree CCW rotations. Applied identically
// to pre, post and gt. Flipped elements are involutions; pure rotations
// invert by rotating the rest of the way around.
Tensor transform_image(const Tensor& img, int id);
Mask transform_mask(const Mask& m, int id);
int inverse_transform(int id);

struct Batch {
    std::vector<int> indices;
    std::vector<int> augment_ids;  // same length; 0 when augmentation is off
};

// Stateless given (n_items, batch_size, order_seed): shuffle order and
// augmentation draws are fully determined, so a resumed run replays epochs
// bitwise. shuffle=false keeps manifest order (eval).
std::vector<Batch> make_batches(int n_items, int batch_size, uint64_t order_seed, bool shuffle,
                                bool augment);

}  // namespace cd
