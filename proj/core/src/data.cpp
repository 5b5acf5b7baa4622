#include "changedet/data.hpp"

#include <algorithm>
#include <filesystem>
#include <stdexcept>

namespace fs = std::filesystem;

namespace cd {

DatasetManifest load_manifest(const std::string& root, const std::string& split,
                              bool strict_256) {
    const fs::path a_dir = fs::path(root) / split / "A";
    const fs::path b_dir = fs::path(root) / split / "B";
    const fs::path l_dir = fs::path(root) / split / "label";
    if (!fs::is_directory(a_dir))
        throw std::runtime_error("dataset layout missing: " + a_dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a_dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    DatasetManifest man;
    man.root = root;
    man.split = split;
    for (const auto& name : names) {
        ManifestItem item;
        item.name = name;
        item.pre_path = (a_dir / name).string();
        item.post_path = (b_dir / name).string();
        item.label_path = (l_dir / name).string();
        if (!fs::exists(item.post_path))
            throw std::runtime_error("missing B/" + name);
        if (!fs::exists(item.label_path))
            throw std::runtime_error("missing label/" + name);
        man.items.push_back(std::move(item));
    }
    if (strict_256)
        for (const auto& item : man.items) (void)load_pair(item, true);
    return man;
}

namespace {

Tensor to_float_rgb(const ImageU8& img) {
    Tensor t({img.h, img.w, 3});
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const uint8_t u = img.channels == 3 ? img.at(y, x, c) : img.at(y, x, 0);
                t.at3(y, x, c) = static_cast<double>(u) / 255.0;
            }
    return t;
}

}  // namespace

LoadedPair load_pair(const ManifestItem& item, bool strict_256) {
    LoadedPair p;
    p.name = item.name;
    const ImageU8 a = read_png(item.pre_path);
    const ImageU8 b = read_png(item.post_path);
    const ImageU8 l = read_png(item.label_path);
    if (a.h != b.h || a.w != b.w || a.h != l.h || a.w != l.w)
        throw std::runtime_error("pair size mismatch: " + item.name);
    if (strict_256 && (a.h != 256 || a.w != 256))
        throw std::runtime_error("expected 256x256 tile: " + item.name);
    p.pre = to_float_rgb(a);
    p.post = to_float_rgb(b);
    p.gt = Mask(l.h, l.w);
    for (int y = 0; y < l.h; ++y)
        for (int x = 0; x < l.w; ++x) p.gt.at(y, x) = l.at(y, x, 0) > 127 ? 1 : 0;
    return p;
}

namespace {

// One CCW quarter turn: out has swapped dims, out(y,x) = in(x, W-1-y).
Tensor rot90_img(const Tensor& in) {
    const int H = in.shape[0], W = in.shape[1], C = in.shape[2];
    Tensor out({W, H, C});
    for (int y = 0; y < W; ++y)
        for (int x = 0; x < H; ++x)
            for (int c = 0; c < C; ++c) out.at3(y, x, c) = in.at3(x, W - 1 - y, c);
    return out;
}

Tensor hflip_img(const Tensor& in) {
    const int H = in.shape[0], W = in.shape[1], C = in.shape[2];
    Tensor out({H, W, C});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) out.at3(y, x, c) = in.at3(y, W - 1 - x, c);
    return out;
}

Mask rot90_mask(const Mask& in) {
    Mask out(in.w, in.h);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) out.at(y, x) = in.at(x, in.w - 1 - y);
    return out;
}

Mask hflip_mask(const Mask& in) {
    Mask out(in.h, in.w);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) out.at(y, x) = in.at(y, in.w - 1 - x);
    return out;
}

}  // namespace

Tensor transform_image(const Tensor& img, int id) {
    if (id < 0 || id >= 8) throw std::invalid_argument("transform id out of range");
    Tensor t = (id & 4) ? hflip_img(img) : img;
    for (int k = 0; k < (id & 3); ++k) t = rot90_img(t);
    return t;
}

Mask transform_mask(const Mask& m, int id) {
    if (id < 0 || id >= 8) throw std::invalid_argument("transform id out of range");
    Mask t = (id & 4) ? hflip_mask(m) : m;
    for (int k = 0; k < (id & 3); ++k) t = rot90_mask(t);
    return t;
}

int inverse_transform(int id) {
    // Flip-containing elements of the dihedral group are involutions; pure
    // rotations invert by completing the turn.
    if (id & 4) return id;
    return (4 - (id & 3)) & 3;
}

std::vector<Batch> make_batches(int n_items, int batch_size, uint64_t order_seed, bool shuffle,
                                bool augment) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    std::vector<int> order(static_cast<size_t>(n_items));
    for (int i = 0; i < n_items; ++i) order[static_cast<size_t>(i)] = i;
    if (shuffle) {
        Rng rng(mix_seed(order_seed, 0));
        for (int i = n_items - 1; i > 0; --i) {
            const int j = rng.uniform_int(i + 1);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        }
    }
    Rng aug_rng(mix_seed(order_seed, 1));
    std::vector<Batch> batches;
    for (int start = 0; start < n_items; start += batch_size) {
        Batch b;
        const int end = std::min(n_items, start + batch_size);
        for (int i = start; i < end; ++i) {
            b.indices.push_back(order[static_cast<size_t>(i)]);
            b.augment_ids.push_back(augment ? aug_rng.uniform_int(8) : 0);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace cd
