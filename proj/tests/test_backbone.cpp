#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "changedet/backbone.hpp"
#include "fd_common.hpp"

using namespace cd;
using namespace fdtest;

namespace {

// closed-form parameter count, in_channels = 3
int64_t expected_params(const std::array<int, 4>& widths, const std::array<int, 4>& depths) {
    auto block = [](int64_t c) { return 8 * c * c + 57 * c; };  // dw + norm + 2 pointwise
    int64_t total = 4 * 4 * 3 * widths[0] + widths[0] + 2 * widths[0];  // stem conv + norm
    for (int i = 0; i < 4; ++i) total += depths[static_cast<size_t>(i)] * block(widths[static_cast<size_t>(i)]);
    for (int i = 1; i < 4; ++i) {
        const int64_t cp = widths[static_cast<size_t>(i - 1)], c = widths[static_cast<size_t>(i)];
        total += 2 * cp + 2 * 2 * cp * c + c;  // pre-norm + 2x2 conv
    }
    return total;
}

Backbone make(const std::array<int, 4>& widths, const std::array<int, 4>& depths, uint64_t seed,
              ParamStore& store) {
    BackboneConfig cfg;
    cfg.widths = widths;
    cfg.depths = depths;
    Backbone bb;
    Rng rng(seed);
    bb.build(cfg, store, rng);
    return bb;
}

}  // namespace

TEST_CASE("build is deterministic and validates config") {
    ParamStore s1, s2;
    make({8, 16, 32, 64}, {1, 1, 1, 1}, 0, s1);
    make({8, 16, 32, 64}, {1, 1, 1, 1}, 0, s2);
    REQUIRE(s1.names == s2.names);
    for (const auto& n : s1.names) CHECK(s1.by_name.at(n)->val.v == s2.by_name.at(n)->val.v);

    ParamStore s3;
    BackboneConfig bad;
    bad.widths = {7, 16, 32, 64};
    Backbone bb;
    Rng rng(0);
    CHECK_THROWS_WITH_AS(bb.build(bad, s3, rng), "stage_widths[0] must be even",
                         std::invalid_argument);
    BackboneConfig bad2;
    bad2.depths = {1, 0, 1, 1};
    CHECK_THROWS_WITH_AS(bb.build(bad2, s3, rng), "stage_depths[1] must be >= 1",
                         std::invalid_argument);
    BackboneConfig bad3;
    bad3.widths = {2, 16, 32, 64};
    CHECK_THROWS_WITH_AS(bb.build(bad3, s3, rng), "stage_widths[0] must be >= 4",
                         std::invalid_argument);
}

TEST_CASE("parameter count matches the closed form") {
    {
        ParamStore s;
        make({16, 32, 64, 128}, {2, 2, 2, 2}, 0, s);
        CHECK(s.total_params() == expected_params({16, 32, 64, 128}, {2, 2, 2, 2}));
    }
    {
        ParamStore s;
        make({8, 16, 32, 64}, {1, 1, 1, 1}, 3, s);
        CHECK(s.total_params() == expected_params({8, 16, 32, 64}, {1, 1, 1, 1}));
    }
    {
        ParamStore s;
        make({8, 8, 8, 8}, {3, 1, 2, 1}, 5, s);
        CHECK(s.total_params() == expected_params({8, 8, 8, 8}, {3, 1, 2, 1}));
    }
}

TEST_CASE("stride schedule and input validation") {
    ParamStore s;
    Backbone bb = make({8, 16, 32, 64}, {1, 1, 1, 1}, 1, s);
    Rng rng(9);
    auto pyr = bb.forward(constant(rand_t({32, 32, 3}, rng, 0, 1)));
    CHECK(pyr[0]->shape() == Shape{8, 8, 8});
    CHECK(pyr[1]->shape() == Shape{4, 4, 16});
    CHECK(pyr[2]->shape() == Shape{2, 2, 32});
    CHECK(pyr[3]->shape() == Shape{1, 1, 64});
    auto pyr2 = bb.forward(constant(rand_t({64, 96, 3}, rng, 0, 1)));
    CHECK(pyr2[0]->shape() == Shape{16, 24, 8});
    CHECK(pyr2[3]->shape() == Shape{2, 3, 64});
    CHECK_THROWS_AS((void)bb.forward(constant(Tensor({31, 32, 3}))), std::invalid_argument);
    CHECK_THROWS_AS((void)bb.forward(constant(Tensor({32, 40, 3}))), std::invalid_argument);
}

TEST_CASE("weight sharing: identical inputs give identical pyramids") {
    ParamStore s;
    Backbone bb = make({8, 16, 32, 64}, {1, 1, 1, 1}, 2, s);
    Rng rng(11);
    Tensor img = rand_t({32, 32, 3}, rng, 0, 1);
    auto a = bb.forward(constant(img));
    auto b = bb.forward(constant(img));
    for (int i = 0; i < 4; ++i) CHECK(a[static_cast<size_t>(i)]->val.v == b[static_cast<size_t>(i)]->val.v);
}

TEST_CASE("siamese symmetry under swap") {
    ParamStore s;
    Backbone bb = make({8, 16, 32, 64}, {1, 1, 1, 1}, 4, s);
    Rng rng(13);
    Tensor pre = rand_t({32, 32, 3}, rng, 0, 1), post = rand_t({32, 32, 3}, rng, 0, 1);
    auto p1 = bb.forward(constant(pre)), p2 = bb.forward(constant(post));
    auto q2 = bb.forward(constant(post)), q1 = bb.forward(constant(pre));
    for (int i = 0; i < 4; ++i) {
        CHECK(p1[static_cast<size_t>(i)]->val.v == q1[static_cast<size_t>(i)]->val.v);
        CHECK(p2[static_cast<size_t>(i)]->val.v == q2[static_cast<size_t>(i)]->val.v);
    }
}

TEST_CASE("finite outputs inside the recorded envelope") {
    // measured max |value| ~2.6 over 10 seeds at this size; pinned with margin
    for (uint64_t seed = 0; seed < 3; ++seed) {
        ParamStore s;
        Backbone bb = make({8, 16, 32, 64}, {1, 1, 1, 1}, seed, s);
        Rng rng(mix_seed(777, seed));
        Tensor img({64, 64, 3});
        for (auto& x : img.v) x = rng.u01();
        auto pyr = bb.forward(constant(img));
        for (const auto& lv : pyr) {
            CHECK(lv->val.all_finite());
            CHECK(lv->val.abs_max() < 50.0);
        }
    }
}

TEST_CASE("input gradient matches finite differences") {
    ParamStore s;
    Backbone bb = make({8, 8, 8, 8}, {1, 1, 1, 1}, 7, s);
    Rng rng(17);
    std::vector<Tensor> leaves = {rand_t({32, 32, 3}, rng, 0, 1)};
    FdOpts opts;
    opts.max_entries = 16;
    check_grads(
        leaves,
        [&](const std::vector<Var>& v) {
            auto pyr = bb.forward(v[0]);
            return ops::add_scalars({ops::sum_all(pyr[0]), ops::sum_all(pyr[1]),
                                     ops::sum_all(pyr[2]), ops::sum_all(pyr[3])});
        },
        opts);
}
