#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "changedet/decoder.hpp"
#include "doctest.h"
#include "fd_common.hpp"

using namespace cd;
using namespace fdtest;
namespace o = cd::ops;

namespace {

struct Rig {
    ParamStore store;
    Decoder dec;
    Rig(const DecoderConfig& cfg, std::array<int, 4> widths, uint64_t seed) {
        Rng rng(seed);
        dec.build(cfg, widths, store, rng);
    }
};

DecoderConfig small_cfg(int Q, int L, int D, int heads, double thr = 0.5) {
    DecoderConfig c;
    c.num_queries = Q;
    c.layers = L;
    c.embed_dim = D;
    c.heads = heads;
    c.mask_threshold = thr;
    return c;
}

std::array<Var, 4> rand_pyramid(Rng& rng, int base_hw, std::array<int, 4> widths,
                                std::vector<Tensor>* keep = nullptr) {
    std::array<Var, 4> p;
    for (int i = 0; i < 4; ++i) {
        Tensor t = rand_t({base_hw >> i, base_hw >> i, widths[static_cast<size_t>(i)]}, rng);
        if (keep) keep->push_back(t);
        p[static_cast<size_t>(i)] = leaf(std::move(t), false);
    }
    return p;
}

void zero_mask_head(ParamStore& s, const Tensor* fc3_bias = nullptr) {
    for (const char* n : {"decoder.mask.fc1.w", "decoder.mask.fc1.b", "decoder.mask.fc2.w",
                          "decoder.mask.fc2.b", "decoder.mask.fc3.w"})
        for (auto& x : s.get(n)->val.v) x = 0.0;
    Tensor& b = s.get("decoder.mask.fc3.b")->val;
    if (fc3_bias)
        b = *fc3_bias;
    else
        for (auto& x : b.v) x = 0.0;
}

bool bitwise_eq(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.v.size(); ++i)
        if (a.v[i] != b.v[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("pixel decoder geometry: stride-4 embedding and 21 memory tokens") {
    Rig r(small_cfg(8, 3, 16, 4), {8, 12, 16, 20}, 1);
    Rng rng(2);
    auto pyr = rand_pyramid(rng, 8, {8, 12, 16, 20});  // a 32x32 input image
    auto px = r.dec.pixel_decode(pyr);
    CHECK(px.per_pixel->shape() == Shape{8, 8, 16});
    CHECK(px.memory[0]->shape() == Shape{1, 16});   // stride 32
    CHECK(px.memory[1]->shape() == Shape{4, 16});   // stride 16
    CHECK(px.memory[2]->shape() == Shape{16, 16});  // stride 8
    int total = 0;
    for (int k = 0; k < 3; ++k) {
        CHECK(px.mem_hw[static_cast<size_t>(k)][0] * px.mem_hw[static_cast<size_t>(k)][1] ==
              px.memory[static_cast<size_t>(k)]->shape()[0]);
        total += px.memory[static_cast<size_t>(k)]->shape()[0];
    }
    CHECK(total == 21);
}

TEST_CASE("all-zero pyramid yields the bias-only embedding") {
    Rig r(small_cfg(4, 2, 16, 4), {8, 8, 8, 8}, 3);
    Rng rng(31);
    for (int i = 0; i < 4; ++i) {
        Tensor& b = r.store.get("decoder.lat" + std::to_string(i) + ".b")->val;
        for (auto& x : b.v) x = static_cast<float>(rng.uniform(-0.5, 0.5));
    }
    std::array<Var, 4> pyr;
    for (int i = 0; i < 4; ++i) pyr[static_cast<size_t>(i)] = leaf(Tensor::zeros({8 >> i, 8 >> i, 8}), false);
    auto px = r.dec.pixel_decode(pyr);
    // top-down addition stacks every level's lateral bias at stride 4
    std::vector<double> want(16, 0.0);
    for (int i = 0; i < 4; ++i) {
        const Tensor& b = r.store.get("decoder.lat" + std::to_string(i) + ".b")->val;
        for (int d = 0; d < 16; ++d) want[static_cast<size_t>(d)] += b.v[static_cast<size_t>(d)];
    }
    for (int p = 0; p < 64; ++p)
        for (int d = 0; d < 16; ++d)
            CHECK(std::abs(px.per_pixel->val.v[p * 16 + d] - want[static_cast<size_t>(d)]) < 1e-12);
    for (int k = 0; k < 3; ++k) CHECK(px.memory[static_cast<size_t>(k)]->val.all_finite());
}

TEST_CASE("pixel decoder gradients") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rig r(small_cfg(4, 2, 16, 4), {8, 12, 16, 20}, mix_seed(seed, 101));
        Rng rng(mix_seed(seed, 102));
        std::vector<Tensor> leaves;
        for (int i = 0; i < 4; ++i) leaves.push_back(rand_t({8 >> i, 8 >> i, (i == 0 ? 8 : i == 1 ? 12 : i == 2 ? 16 : 20)}, rng));
        FdOpts opts;
        opts.max_entries = 3;
        check_grads(
            leaves,
            [&](const std::vector<Var>& in) {
                std::array<Var, 4> pyr{in[0], in[1], in[2], in[3]};
                auto px = r.dec.pixel_decode(pyr);
                Var s = weighted_readout(px.per_pixel, seed);
                for (int k = 0; k < 3; ++k)
                    s = o::add(s, weighted_readout(px.memory[static_cast<size_t>(k)], seed + 10 + k));
                return s;
            },
            opts);
    }
}

TEST_CASE("single query: mask logits are dot products with the pixel embedding") {
    Rig r(small_cfg(1, 1, 16, 4), {8, 8, 8, 8}, 7);
    Rng rng(71);
    Tensor v({16});
    for (auto& x : v.v) x = rng.uniform(-1.0, 1.0);
    zero_mask_head(r.store, &v);
    auto pyr = rand_pyramid(rng, 8, {8, 8, 8, 8});
    auto px = r.dec.pixel_decode(pyr);
    QuerySet qs = r.dec.transformer_decode(px);
    REQUIRE(qs.mask_logits->shape() == Shape{1, 8, 8});
    for (int p = 0; p < 64; ++p) {
        double dot = 0;
        for (int d = 0; d < 16; ++d) dot += v.v[d] * px.per_pixel->val.v[p * 16 + d];
        CHECK(std::abs(qs.mask_logits->val.v[p] - dot) < 1e-9);
    }
}

TEST_CASE("empty admissible set falls back to unmasked cross-attention") {
    // zeroed mask head -> every mask logit is 0 -> sigmoid 0.5, never above the
    // 0.5 threshold -> all queries fall back. The reference decoder admits all
    // tokens by construction (threshold ~ 0).
    Rig masked(small_cfg(4, 2, 16, 4, 0.5), {8, 8, 8, 8}, 11);
    Rig open(small_cfg(4, 2, 16, 4, 1e-9), {8, 8, 8, 8}, 11);
    zero_mask_head(masked.store);
    zero_mask_head(open.store);
    Rng rng(111);
    std::vector<Tensor> keep;
    auto pyr = rand_pyramid(rng, 8, {8, 8, 8, 8}, &keep);
    std::array<Var, 4> pyr2;
    for (int i = 0; i < 4; ++i) pyr2[static_cast<size_t>(i)] = leaf(keep[static_cast<size_t>(i)], false);
    QuerySet a = masked.dec.forward(pyr);
    QuerySet b = open.dec.forward(pyr2);
    CHECK(bitwise_eq(a.class_logits->val, b.class_logits->val));
    CHECK(bitwise_eq(a.mask_logits->val, b.mask_logits->val));
}

TEST_CASE("transformer decoder gradients (Q=4, L=2, D=16)") {
    // tiny threshold keeps the admissible sets full so the frozen attention
    // mask cannot flip under finite-difference nudges
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rig r(small_cfg(4, 2, 16, 4, 1e-6), {8, 8, 8, 8}, mix_seed(seed, 201));
        Rng rng(mix_seed(seed, 202));
        std::vector<Tensor> leaves{rand_t({4, 4, 16}, rng), rand_t({1, 16}, rng),
                                   rand_t({4, 16}, rng), rand_t({9, 16}, rng)};
        FdOpts opts;
        opts.max_entries = 3;
        check_grads(
            leaves,
            [&](const std::vector<Var>& in) {
                Decoder::PixelOut px;
                px.per_pixel = in[0];
                px.memory = {in[1], in[2], in[3]};
                px.mem_hw = {{{1, 1}, {2, 2}, {3, 3}}};
                QuerySet qs = r.dec.transformer_decode(px);
                return o::add(weighted_readout(qs.class_logits, seed),
                              weighted_readout(qs.mask_logits, seed + 50));
            },
            opts);
    }
    // parameter gradients, including the learned query embeddings
    Rig r(small_cfg(4, 2, 16, 4, 1e-6), {8, 8, 8, 8}, 13);
    Rng rng(131);
    Tensor ppe = rand_t({4, 4, 16}, rng);
    Tensor m0 = rand_t({1, 16}, rng), m1 = rand_t({4, 16}, rng), m2 = rand_t({9, 16}, rng);
    FdOpts popts;
    popts.max_entries = 5;
    check_param_grads(
        r.store,
        {"decoder.query_feat", "decoder.query_pos", "decoder.class.w", "decoder.mask.fc3.w",
         "decoder.layer0.cross.q.w", "decoder.layer1.self.v.w", "decoder.layer0.ffn.fc1.w",
         "decoder.norm.g"},
        [&]() {
            Decoder::PixelOut px;
            px.per_pixel = constant(ppe);
            px.memory = {constant(m0), constant(m1), constant(m2)};
            px.mem_hw = {{{1, 1}, {2, 2}, {3, 3}}};
            QuerySet qs = r.dec.transformer_decode(px);
            return o::add(weighted_readout(qs.class_logits, 1), weighted_readout(qs.mask_logits, 2));
        },
        popts);
}

TEST_CASE("LSE aggregation: single query is an exact sum") {
    Rig r(small_cfg(1, 1, 16, 4), {8, 8, 8, 8}, 17);
    Rng rng(171);
    Tensor p = rand_t({1, 3}, rng, -2.0, 2.0);
    Tensor m = rand_t({1, 3, 4}, rng, -2.0, 2.0);
    QuerySet qs{leaf(p, false), leaf(m, false)};
    Var dense = r.dec.aggregate(qs);
    REQUIRE(dense->shape() == Shape{3, 4, 2});
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 2; ++c)
                CHECK(dense->val.at3(y, x, c) ==
                      doctest::Approx(p.v[c] + m.v[y * 4 + x]).epsilon(1e-12));
}

TEST_CASE("LSE aggregation: duplicating a query adds log 2 and preserves probabilities") {
    Rig r(small_cfg(1, 1, 16, 4), {8, 8, 8, 8}, 19);
    Rng rng(191);
    Tensor p1 = rand_t({1, 3}, rng), m1 = rand_t({1, 2, 2}, rng);
    Tensor p2({2, 3}), m2({2, 2, 2});
    for (int c = 0; c < 3; ++c) p2.v[c] = p2.v[3 + c] = p1.v[c];
    for (int i = 0; i < 4; ++i) m2.v[i] = m2.v[4 + i] = m1.v[i];
    Var d1 = r.dec.aggregate(QuerySet{leaf(p1, false), leaf(m1, false)});
    Var d2 = r.dec.aggregate(QuerySet{leaf(p2, false), leaf(m2, false)});
    const double ln2 = std::log(2.0);
    for (int i = 0; i < 8; ++i) CHECK(std::abs(d2->val.v[i] - d1->val.v[i] - ln2) < 1e-12);
    for (int pix = 0; pix < 4; ++pix) {
        auto prob = [&](const Tensor& d) {
            const double b = d.v[pix * 2], c = d.v[pix * 2 + 1];
            return 1.0 / (1.0 + std::exp(b - c));
        };
        CHECK(std::abs(prob(d1->val) - prob(d2->val)) < 1e-12);
    }
}

TEST_CASE("LSE aggregation matches a high-precision direct sum") {
    Rig r(small_cfg(3, 1, 16, 4), {8, 8, 8, 8}, 23);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(mix_seed(seed, 231));
        Tensor p = rand_t({3, 3}, rng, -3.0, 3.0);
        Tensor m = rand_t({3, 2, 2}, rng, -3.0, 3.0);
        Var dense = r.dec.aggregate(QuerySet{leaf(p, false), leaf(m, false)});
        for (int pix = 0; pix < 4; ++pix)
            for (int c = 0; c < 2; ++c) {
                long double s = 0;
                for (int q = 0; q < 3; ++q)
                    s += expl(static_cast<long double>(p.v[q * 3 + c]) +
                              static_cast<long double>(m.v[q * 4 + pix]));
                CHECK(std::abs(dense->val.v[pix * 2 + c] - static_cast<double>(logl(s))) < 1e-12);
            }
    }
}

TEST_CASE("LSE aggregation: permutation, shared shift, monotonicity, no-object exclusion") {
    Rig r(small_cfg(4, 1, 16, 4), {8, 8, 8, 8}, 29);
    Rng rng(291);
    Tensor p = rand_t({4, 3}, rng), m = rand_t({4, 2, 3}, rng);
    Var base = r.dec.aggregate(QuerySet{leaf(p, false), leaf(m, false)});

    // permuting queries leaves the aggregate unchanged
    const int perm[4] = {2, 0, 3, 1};
    Tensor pp({4, 3}), mp({4, 2, 3});
    for (int q = 0; q < 4; ++q)
        for (int c = 0; c < 3; ++c) pp.v[q * 3 + c] = p.v[perm[q] * 3 + c];
    for (int q = 0; q < 4; ++q)
        for (int i = 0; i < 6; ++i) mp.v[q * 6 + i] = m.v[perm[q] * 6 + i];
    Var permed = r.dec.aggregate(QuerySet{leaf(pp, false), leaf(mp, false)});
    for (int i = 0; i < 12; ++i) CHECK(std::abs(permed->val.v[i] - base->val.v[i]) < 1e-12);

    // adding delta to every query's mask logit at one pixel shifts both dense
    // logits by delta and cancels in the softmax
    const int pix = 4;
    const double delta = 0.8375;
    Tensor ms = m;
    for (int q = 0; q < 4; ++q) ms.v[q * 6 + pix] += delta;
    Var shifted = r.dec.aggregate(QuerySet{leaf(p, false), leaf(ms, false)});
    for (int c = 0; c < 2; ++c)
        CHECK(std::abs(shifted->val.v[pix * 2 + c] - base->val.v[pix * 2 + c] - delta) < 1e-11);
    auto prob = [](const Tensor& d, int px_) {
        const double b = d.v[px_ * 2], c = d.v[px_ * 2 + 1];
        return 1.0 / (1.0 + std::exp(b - c));
    };
    CHECK(std::abs(prob(shifted->val, pix) - prob(base->val, pix)) < 1e-9);

    // raising one query's chg logit raises every chg logit, leaves bg alone
    Tensor pup = p;
    pup.v[2 * 3 + 1] += 0.5;
    Var up = r.dec.aggregate(QuerySet{leaf(pup, false), leaf(m, false)});
    for (int i = 0; i < 6; ++i) {
        CHECK(up->val.v[i * 2 + 1] > base->val.v[i * 2 + 1]);
        CHECK(up->val.v[i * 2 + 0] == base->val.v[i * 2 + 0]);
    }

    // the no-object column never participates
    Tensor pn = p;
    for (int q = 0; q < 4; ++q) pn.v[q * 3 + 2] = 1e6 * (q + 1);
    Var noobj = r.dec.aggregate(QuerySet{leaf(pn, false), leaf(m, false)});
    CHECK(bitwise_eq(noobj->val, base->val));
}

TEST_CASE("LSE aggregation is stable at magnitude 1e4") {
    Rig r(small_cfg(2, 1, 16, 4), {8, 8, 8, 8}, 31);
    Tensor p({2, 3}), m({2, 2, 2});
    p.v = {1e4, -1e4, 0.0, -1e4, 1e4, 0.0};
    m.v = {1e4, -1e4, 5.0, -5.0, 1e4, 1e4, -1e4, -1e4};
    Var dense = r.dec.aggregate(QuerySet{leaf(p, false), leaf(m, false)});
    CHECK(dense->val.all_finite());
    CHECK(dense->val.v[0] == doctest::Approx(2e4).epsilon(1e-9));
}

TEST_CASE("LSE aggregation gradients") {
    Rig r(small_cfg(3, 1, 16, 4), {8, 8, 8, 8}, 37);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(mix_seed(seed, 371));
        std::vector<Tensor> leaves{rand_t({3, 3}, rng, -2.0, 2.0), rand_t({3, 2, 3}, rng, -2.0, 2.0)};
        check_grads(leaves, [&](const std::vector<Var>& in) {
            return weighted_readout(r.dec.aggregate(QuerySet{in[0], in[1]}), seed);
        });
    }
}

TEST_CASE("log-softmax aggregation normalizes the class columns first") {
    DecoderConfig cfg = small_cfg(2, 1, 16, 4);
    cfg.log_softmax_agg = true;
    Rig r(cfg, {8, 8, 8, 8}, 41);
    Rng rng(411);
    Tensor p = rand_t({2, 3}, rng), m = rand_t({2, 2, 2}, rng);
    Var dense = r.dec.aggregate(QuerySet{leaf(p, false), leaf(m, false)});
    for (int pix = 0; pix < 4; ++pix)
        for (int c = 0; c < 2; ++c) {
            long double s = 0;
            for (int q = 0; q < 2; ++q) {
                long double z = 0;
                for (int k = 0; k < 3; ++k) z += expl(static_cast<long double>(p.v[q * 3 + k]));
                const long double logp = static_cast<long double>(p.v[q * 3 + c]) - logl(z);
                s += expl(logp + static_cast<long double>(m.v[q * 4 + pix]));
            }
            CHECK(std::abs(dense->val.v[pix * 2 + c] - static_cast<double>(logl(s))) < 1e-12);
        }
}

TEST_CASE("predict_mask: tie resolves to background, dominant change wins") {
    Tensor tie({3, 3, 2});
    for (int i = 0; i < 9; ++i) {
        tie.v[i * 2] = 0.37;
        tie.v[i * 2 + 1] = 0.37;
    }
    Mask m0 = Decoder::predict_mask(tie, 12, 12);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) CHECK(m0.at(y, x) == 0);
    Tensor hot = tie;
    for (int i = 0; i < 9; ++i) hot.v[i * 2 + 1] = 10.37;
    Mask m1 = Decoder::predict_mask(hot, 12, 12);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) CHECK(m1.at(y, x) == 1);
}

TEST_CASE("predict_mask matches an independent softmax+bilinear+threshold oracle") {
    const int h = 4, w = 4, H = 16, W = 16;
    Tensor dense({h, w, 2});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double a = ((y + x) % 2 == 0) ? 2.0 : -2.0;
            dense.at3(y, x, 0) = a;
            dense.at3(y, x, 1) = -a;
        }
    Mask got = Decoder::predict_mask(dense, H, W);
    auto src = [](int i, int out, int in) {
        return std::clamp((i + 0.5) * in / out - 0.5, 0.0, in - 1.0);
    };
    std::vector<double> prob(h * w);
    for (int i = 0; i < h * w; ++i)
        prob[static_cast<size_t>(i)] =
            1.0 / (1.0 + std::exp(dense.v[i * 2] - dense.v[i * 2 + 1]));
    int ones = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double yc = src(y, H, h), xc = src(x, W, w);
            const int y0 = static_cast<int>(std::floor(yc)), y1 = std::min(y0 + 1, h - 1);
            const int x0 = static_cast<int>(std::floor(xc)), x1 = std::min(x0 + 1, w - 1);
            const double fy = yc - y0, fx = xc - x0;
            const double p = (1 - fy) * ((1 - fx) * prob[static_cast<size_t>(y0 * w + x0)] +
                                         fx * prob[static_cast<size_t>(y0 * w + x1)]) +
                             fy * ((1 - fx) * prob[static_cast<size_t>(y1 * w + x0)] +
                                   fx * prob[static_cast<size_t>(y1 * w + x1)]);
            CHECK(got.at(y, x) == (p > 0.5 ? 1 : 0));
            ones += got.at(y, x);
        }
    CHECK(ones > 0);
    CHECK(ones < H * W);
}

TEST_CASE("full decoder forward produces a finite query set deterministically") {
    Rig a(small_cfg(8, 3, 16, 4), {8, 12, 16, 20}, 43);
    Rig b(small_cfg(8, 3, 16, 4), {8, 12, 16, 20}, 43);
    Rng rng(431);
    std::vector<Tensor> keep;
    auto pyr = rand_pyramid(rng, 8, {8, 12, 16, 20}, &keep);
    std::array<Var, 4> pyr2;
    for (int i = 0; i < 4; ++i) pyr2[static_cast<size_t>(i)] = leaf(keep[static_cast<size_t>(i)], false);
    QuerySet qa = a.dec.forward(pyr);
    QuerySet qb = b.dec.forward(pyr2);
    REQUIRE(qa.class_logits->shape() == Shape{8, 3});
    REQUIRE(qa.mask_logits->shape() == Shape{8, 8, 8});
    CHECK(qa.class_logits->val.all_finite());
    CHECK(qa.mask_logits->val.all_finite());
    CHECK(bitwise_eq(qa.class_logits->val, qb.class_logits->val));
    CHECK(bitwise_eq(qa.mask_logits->val, qb.mask_logits->val));
    Var dense = a.dec.aggregate(qa);
    Mask m = Decoder::predict_mask(dense->val, 32, 32);
    CHECK(m.h == 32);
    CHECK(m.w == 32);
}

TEST_CASE("decoder build rejects bad configs") {
    ParamStore s;
    Decoder d;
    Rng rng(1);
    CHECK_THROWS_AS(d.build(small_cfg(8, 3, 18, 4), {8, 8, 8, 8}, s, rng), std::invalid_argument);
    ParamStore s2;
    CHECK_THROWS_AS(d.build(small_cfg(8, 3, 24, 5), {8, 8, 8, 8}, s2, rng), std::invalid_argument);
    ParamStore s3;
    CHECK_THROWS_AS(d.build(small_cfg(0, 3, 16, 4), {8, 8, 8, 8}, s3, rng), std::invalid_argument);
    ParamStore s4;
    CHECK_THROWS_AS(d.build(small_cfg(8, 0, 16, 4), {8, 8, 8, 8}, s4, rng), std::invalid_argument);
}
