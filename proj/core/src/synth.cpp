#include "changedet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "changedet/ops.hpp"

namespace fs = std::filesystem;

namespace cd {

namespace {

struct Blob {
    int kind;  // 0 rect, 1 ellipse
    double cy, cx, ry, rx;
    double r, g, b;

    bool covers(int y, int x) const {
        const double dy = y - cy, dx = x - cx;
        if (kind == 0) return std::abs(dy) <= ry && std::abs(dx) <= rx;
        const double u = dy / ry, v = dx / rx;
        return u * u + v * v <= 1.0;
    }
};

Blob random_blob(Rng& rng, const SynthConfig& cfg) {
    Blob s;
    if (cfg.use_rectangles && cfg.use_ellipses)
        s.kind = rng.coin() ? 1 : 0;
    else if (cfg.use_ellipses)
        s.kind = 1;
    else
        s.kind = 0;
    const double hmin = std::max(2.0, cfg.height / 16.0), hmax = cfg.height / 5.0;
    const double wmin = std::max(2.0, cfg.width / 16.0), wmax = cfg.width / 5.0;
    s.cy = rng.uniform(0.0, cfg.height - 1.0);
    s.cx = rng.uniform(0.0, cfg.width - 1.0);
    s.ry = rng.uniform(hmin, hmax);
    s.rx = rng.uniform(wmin, wmax);
    s.r = rng.uniform(0.15, 0.95);
    s.g = rng.uniform(0.15, 0.95);
    s.b = rng.uniform(0.15, 0.95);
    return s;
}

Tensor textured_background(Rng& rng, int H, int W) {
    // Smooth texture: bilinear blow-up of a coarse random color grid.
    const int gh = 8, gw = 8;
    Tensor coarse({gh, gw, 3});
    for (int64_t i = 0; i < coarse.numel(); ++i) coarse[i] = rng.uniform(0.25, 0.75);
    return ops::bilinear_resize(coarse, H, W);
}

void paint(Tensor& img, const std::vector<Blob>& blobs) {
    const int H = img.shape[0], W = img.shape[1];
    for (const Blob& s : blobs) {
        const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.ry - 1)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(s.cy + s.ry + 1)));
        const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.rx - 1)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(s.cx + s.rx + 1)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (s.covers(y, x)) {
                    img.at3(y, x, 0) = s.r;
                    img.at3(y, x, 1) = s.g;
                    img.at3(y, x, 2) = s.b;
                }
    }
}

Mask occupancy(const std::vector<Blob>& blobs, int H, int W) {
    Mask m(H, W);
    for (const Blob& s : blobs) {
        const int y0 = std::max(0, static_cast<int>(std::floor(s.cy - s.ry - 1)));
        const int y1 = std::min(H - 1, static_cast<int>(std::ceil(s.cy + s.ry + 1)));
        const int x0 = std::max(0, static_cast<int>(std::floor(s.cx - s.rx - 1)));
        const int x1 = std::min(W - 1, static_cast<int>(std::ceil(s.cx + s.rx + 1)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (s.covers(y, x)) m.at(y, x) = 1;
    }
    return m;
}

Tensor translate_bilinear(const Tensor& img, double dy, double dx) {
    const int H = img.shape[0], W = img.shape[1], C = img.shape[2];
    Tensor out({H, W, C});
    for (int y = 0; y < H; ++y) {
        const double sy = std::clamp(y + dy, 0.0, static_cast<double>(H - 1));
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, H - 1);
        const double fy = sy - y0;
        for (int x = 0; x < W; ++x) {
            const double sx = std::clamp(x + dx, 0.0, static_cast<double>(W - 1));
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, W - 1);
            const double fx = sx - x0;
            for (int c = 0; c < C; ++c)
                out.at3(y, x, c) =
                    (1 - fy) * ((1 - fx) * img.at3(y0, x0, c) + fx * img.at3(y0, x1, c)) +
                    fy * ((1 - fx) * img.at3(y1, x0, c) + fx * img.at3(y1, x1, c));
        }
    }
    return out;
}

}  // namespace

SynthPair generate_pair(const SynthConfig& cfg) {
    if (cfg.height < 8 || cfg.width < 8) throw std::invalid_argument("synth: size too small");
    if (!cfg.use_rectangles && !cfg.use_ellipses)
        throw std::invalid_argument("synth: no shape kinds enabled");
    Rng scene(mix_seed(cfg.seed, 0));
    Rng nuisance(mix_seed(cfg.seed, 1));
    const int H = cfg.height, W = cfg.width;

    Tensor background = textured_background(scene, H, W);
    std::vector<Blob> base;
    for (int i = 0; i < cfg.n_base_shapes; ++i) base.push_back(random_blob(scene, cfg));

    // Change ops: delete one surviving *original* blob or add a fresh one.
    // Removals never target blobs added by an earlier op, so ops cannot
    // cancel out and leave an accidental no-change pair. Originals stay a
    // prefix of shapes_b because adds append.
    std::vector<Blob> shapes_b = base;
    int orig_alive = static_cast<int>(base.size());
    for (int i = 0; i < cfg.n_change_shapes; ++i) {
        const bool remove = orig_alive > 0 && scene.coin();
        if (remove) {
            const int k = scene.uniform_int(orig_alive);
            shapes_b.erase(shapes_b.begin() + k);
            --orig_alive;
        } else {
            shapes_b.push_back(random_blob(scene, cfg));
        }
    }

    SynthPair out;
    out.pre = background;
    paint(out.pre, base);
    Tensor post = background;
    paint(post, shapes_b);

    // gt: occupancy XOR before any nuisance, in the pre-image frame.
    Mask occ_a = occupancy(base, H, W);
    Mask occ_b = occupancy(shapes_b, H, W);
    out.gt = Mask(H, W);
    for (size_t i = 0; i < out.gt.v.size(); ++i) out.gt.v[i] = occ_a.v[i] != occ_b.v[i] ? 1 : 0;

    // Nuisances, post image only: warp -> brightness -> noise.
    const double r = nuisance.uniform(0.0, cfg.max_offset_px);
    const double theta = nuisance.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double dy = r * std::sin(theta), dx = r * std::cos(theta);
    post = translate_bilinear(post, dy, dx);
    const double shift = nuisance.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);
    for (double& x : post.v) x += shift;
    if (cfg.noise_sigma > 0.0)
        for (double& x : post.v) x += cfg.noise_sigma * nuisance.normal();
    for (double& x : post.v) x = std::clamp(x, 0.0, 1.0);
    out.post = std::move(post);
    return out;
}

ImageU8 to_u8_rgb(const Tensor& img01) {
    const int H = img01.shape[0], W = img01.shape[1];
    ImageU8 out(H, W, 3);
    for (int64_t i = 0; i < img01.numel(); ++i) {
        const double x = std::clamp(img01[i], 0.0, 1.0);
        out.v[static_cast<size_t>(i)] = static_cast<uint8_t>(std::lround(x * 255.0));
    }
    return out;
}

ImageU8 to_u8_label(const Mask& m) {
    ImageU8 out(m.h, m.w, 1);
    for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] ? 255 : 0;
    return out;
}

DatasetManifest generate_dataset(const SynthConfig& cfg, int n, const std::string& out_dir) {
    if (n < 0) throw std::invalid_argument("generate_dataset: n < 0");
    fs::create_directories(fs::path(out_dir) / "A");
    fs::create_directories(fs::path(out_dir) / "B");
    fs::create_directories(fs::path(out_dir) / "label");
    DatasetManifest man;
    man.root = out_dir;
    for (int i = 0; i < n; ++i) {
        SynthConfig c = cfg;
        c.seed = cfg.seed + static_cast<uint64_t>(i);
        SynthPair p = generate_pair(c);
        char name[32];
        std::snprintf(name, sizeof name, "pair_%05d.png", i);
        ManifestItem item;
        item.name = name;
        item.pre_path = (fs::path(out_dir) / "A" / name).string();
        item.post_path = (fs::path(out_dir) / "B" / name).string();
        item.label_path = (fs::path(out_dir) / "label" / name).string();
        write_png(item.pre_path, to_u8_rgb(p.pre));
        write_png(item.post_path, to_u8_rgb(p.post));
        write_png(item.label_path, to_u8_label(p.gt));
        man.items.push_back(std::move(item));
    }
    return man;
}

}  // namespace cd
