#pragma once

#include <cstdint>
#include <vector>

namespace cd {

// Binary raster, row-major, values 0/1. Change is the positive class.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}
    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    int64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

struct MetricsReport {
    double f1 = 0.0, iou = 0.0, oa = 0.0;  // all in [0,1]; OA rendered x100 in tables
    ConfusionCounts counts;
};

void accumulate(const Mask& pred, const Mask& gt, ConfusionCounts& counts);
MetricsReport report(const ConfusionCounts& counts);

// F1 = 2*IoU / (1 + IoU); strictly increasing on [0,1].
double f1_from_iou(double iou);

// Rounding-interval audit of a (reported F1, reported IoU) pair at a given
// number of decimals. Both figures are taken as round-half-up renderings, so
// each stands for a half-open interval [r - 0.5*10^-d, r + 0.5*10^-d). The IoU
// interval is mapped through f1_from_iou and the verdict is whether the two
// F1 intervals intersect.
struct AuditResult {
    bool consistent = false;
    double f1_lo = 0.0, f1_hi = 0.0;  // image of the IoU rounding interval
};
AuditResult audit_consistency(double reported_f1, double reported_iou, int decimals);

// Round-half-up at d decimals (the convention the audit assumes reports use).
double round_half_up(double x, int decimals);

}  // namespace cd
