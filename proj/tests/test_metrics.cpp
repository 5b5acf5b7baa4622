#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "changedet/metrics.hpp"
#include "changedet/tensor.hpp"
#include "doctest.h"

using namespace cd;

namespace {

Mask random_mask(Rng& rng, int h, int w) {
    Mask m(h, w);
    for (auto& v : m.v) v = rng.coin() ? 1 : 0;
    return m;
}

}  // namespace

TEST_CASE("accumulate: trivial tallies") {
    ConfusionCounts c;
    Mask z(4, 4);
    accumulate(z, z, c);
    CHECK(c.tn == 16);
    CHECK(c.tp + c.fp + c.fn == 0);

    ConfusionCounts d;
    Mask inv(4, 4);
    for (auto& v : inv.v) v = 1;
    accumulate(inv, z, d);  // pred = !gt
    CHECK(d.fp == 16);
    accumulate(z, inv, d);
    CHECK(d.fn == 16);
    CHECK(d.tp + d.tn == 0);

    Mask small(2, 2);
    CHECK_THROWS_AS(accumulate(small, z, d), std::invalid_argument);
}

TEST_CASE("accumulate matches a naive pixel loop on random pairs") {
    Rng rng(42);
    for (int trial = 0; trial < 100; ++trial) {
        Mask pred = random_mask(rng, 16, 16), gt = random_mask(rng, 16, 16);
        ConfusionCounts c;
        accumulate(pred, gt, c);
        int64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (int i = 0; i < 256; ++i) {
            const bool p = pred.v[static_cast<size_t>(i)] != 0, g = gt.v[static_cast<size_t>(i)] != 0;
            tp += p && g;
            fp += p && !g;
            fn += !p && g;
            tn += !p && !g;
        }
        CHECK(c.tp == tp);
        CHECK(c.fp == fp);
        CHECK(c.fn == fn);
        CHECK(c.tn == tn);
        CHECK(c.total() == 256);
    }
}

TEST_CASE("accumulate is additive over any grouping") {
    Rng rng(43);
    std::vector<Mask> preds, gts;
    for (int i = 0; i < 6; ++i) {
        preds.push_back(random_mask(rng, 8, 8));
        gts.push_back(random_mask(rng, 8, 8));
    }
    ConfusionCounts whole;
    for (int i = 0; i < 6; ++i) accumulate(preds[static_cast<size_t>(i)], gts[static_cast<size_t>(i)], whole);
    ConfusionCounts a, b;
    for (int i = 0; i < 3; ++i) accumulate(preds[static_cast<size_t>(i)], gts[static_cast<size_t>(i)], a);
    for (int i = 3; i < 6; ++i) accumulate(preds[static_cast<size_t>(i)], gts[static_cast<size_t>(i)], b);
    a += b;
    CHECK(a.tp == whole.tp);
    CHECK(a.fp == whole.fp);
    CHECK(a.fn == whole.fn);
    CHECK(a.tn == whole.tn);
}

TEST_CASE("report: pinned arithmetic and degenerate convention") {
    ConfusionCounts perfect{10, 0, 0, 6};
    MetricsReport r = report(perfect);
    CHECK(r.f1 == 1.0);
    CHECK(r.iou == 1.0);
    CHECK(r.oa == 1.0);

    ConfusionCounts c{3, 1, 2, 10};
    r = report(c);
    CHECK(r.iou == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(r.f1 == doctest::Approx(6.0 / 9.0).epsilon(1e-15));
    CHECK(r.oa == doctest::Approx(13.0 / 16.0).epsilon(1e-15));

    // no positives anywhere: degenerate denominators read as 1
    ConfusionCounts none{0, 0, 0, 25};
    r = report(none);
    CHECK(r.f1 == 1.0);
    CHECK(r.iou == 1.0);
    CHECK(r.oa == 1.0);

    CHECK_THROWS_AS(report(ConfusionCounts{}), std::invalid_argument);
}

TEST_CASE("the F1-IoU identity holds for every counts combination") {
    Rng rng(44);
    for (int trial = 0; trial < 1000; ++trial) {
        ConfusionCounts c{static_cast<int64_t>(rng.uniform_int(50)),
                          static_cast<int64_t>(rng.uniform_int(50)),
                          static_cast<int64_t>(rng.uniform_int(50)),
                          static_cast<int64_t>(rng.uniform_int(50))};
        if (c.total() == 0) c.tn = 1;
        MetricsReport r = report(c);
        CHECK(std::abs(r.f1 - 2.0 * r.iou / (1.0 + r.iou)) < 1e-12);
        CHECK(r.f1 >= 0.0);
        CHECK(r.f1 <= 1.0);
        CHECK(r.iou <= r.f1);  // AM-GM style: f1 >= iou always
    }
}

TEST_CASE("f1_from_iou: fixed points, supplementary values, monotonicity") {
    CHECK(f1_from_iou(1.0) == 1.0);
    CHECK(f1_from_iou(0.0) == 0.0);
    CHECK(f1_from_iou(0.8505) == doctest::Approx(0.9192110).epsilon(1e-6));
    CHECK(f1_from_iou(0.850) == doctest::Approx(0.9189189).epsilon(1e-6));
    CHECK_THROWS_AS(f1_from_iou(-0.1), std::invalid_argument);
    CHECK_THROWS_AS(f1_from_iou(1.1), std::invalid_argument);
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
        const double f = f1_from_iou(i / 100.0);
        CHECK(f > prev);
        prev = f;
    }
}

TEST_CASE("round_half_up follows the reporting convention") {
    CHECK(round_half_up(0.8505, 3) == doctest::Approx(0.851).epsilon(1e-12));
    CHECK(round_half_up(0.8494999, 3) == doctest::Approx(0.849).epsilon(1e-12));
    CHECK(round_half_up(0.9215, 3) == doctest::Approx(0.922).epsilon(1e-12));
    CHECK(round_half_up(2.5, 0) == doctest::Approx(3.0));
}

TEST_CASE("audit: supplementary worked example and re-evaluated row") {
    // reported LEVIR-CD style pair: F1 0.921 vs IoU 0.850 cannot both round
    AuditResult bad = audit_consistency(0.921, 0.850, 3);
    CHECK(!bad.consistent);
    CHECK(bad.f1_lo == doctest::Approx(0.9186267).epsilon(1e-6));
    CHECK(bad.f1_hi == doctest::Approx(0.9192110).epsilon(1e-6));
    // the implied F1 interval sits strictly below the reported figure's own
    // rounding interval [0.9205, 0.9215)
    CHECK(bad.f1_hi <= 0.9205);

    AuditResult good = audit_consistency(0.919, 0.850, 3);
    CHECK(good.consistent);

    AuditResult ones = audit_consistency(1.0, 1.0, 3);
    CHECK(ones.consistent);
}

TEST_CASE("audit round trip: a model's own rounded report is always consistent") {
    Rng rng(45);
    for (int trial = 0; trial < 1000; ++trial) {
        ConfusionCounts c{static_cast<int64_t>(rng.uniform_int(500)),
                          static_cast<int64_t>(rng.uniform_int(100)),
                          static_cast<int64_t>(rng.uniform_int(100)),
                          static_cast<int64_t>(rng.uniform_int(2000))};
        if (c.total() == 0) c.tn = 1;
        MetricsReport r = report(c);
        const int decimals = 1 + static_cast<int>(rng.uniform_int(4));
        AuditResult a = audit_consistency(round_half_up(r.f1, decimals),
                                          round_half_up(r.iou, decimals), decimals);
        CHECK(a.consistent);
    }
}

TEST_CASE("audit intervals are exact images of the IoU rounding interval") {
    const AuditResult a = audit_consistency(0.5, 0.437, 3);
    CHECK(a.f1_lo == doctest::Approx(f1_from_iou(0.4365)).epsilon(1e-12));
    CHECK(a.f1_hi == doctest::Approx(f1_from_iou(0.4375)).epsilon(1e-12));
    // interval width shrinks with more decimals
    const AuditResult b = audit_consistency(0.5, 0.437, 4);
    CHECK(b.f1_hi - b.f1_lo < a.f1_hi - a.f1_lo);
}
