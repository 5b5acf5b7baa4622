#include "changedet/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace cd {

void accumulate(const Mask& pred, const Mask& gt, ConfusionCounts& counts) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("accumulate: mask shape mismatch");
    const size_t n = pred.v.size();
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (size_t i = 0; i < n; ++i) {
        const bool p = pred.v[i] != 0, g = gt.v[i] != 0;
        if (p && g)
            ++tp;
        else if (p && !g)
            ++fp;
        else if (!p && g)
            ++fn;
        else
            ++tn;
    }
    counts.tp += tp;
    counts.fp += fp;
    counts.fn += fn;
    counts.tn += tn;
}

MetricsReport report(const ConfusionCounts& c) {
    if (c.total() <= 0) throw std::invalid_argument("report: no pixels accumulated");
    MetricsReport r;
    r.counts = c;
    const int64_t iou_den = c.tp + c.fp + c.fn;
    r.iou = iou_den == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(iou_den);
    const int64_t f1_den = 2 * c.tp + c.fp + c.fn;
    r.f1 = f1_den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(f1_den);
    r.oa = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    return r;
}

double f1_from_iou(double iou) {
    if (iou < 0.0 || iou > 1.0) throw std::invalid_argument("f1_from_iou: iou out of [0,1]");
    return 2.0 * iou / (1.0 + iou);
}

double round_half_up(double x, int decimals) {
    const double p = std::pow(10.0, decimals);
    return std::floor(x * p + 0.5) / p;
}

AuditResult audit_consistency(double reported_f1, double reported_iou, int decimals) {
    if (decimals < 1) throw std::invalid_argument("audit: decimals must be >= 1");
    const double half = 0.5 * std::pow(10.0, -decimals);
    const double iou_lo = reported_iou - half;
    const double iou_hi = reported_iou + half;
    // Map through the identity by formula; the interval edges may poke past
    // [0,1] (e.g. a reported 1.000), where the formula is still monotone.
    auto f = [](double u) { return 2.0 * u / (1.0 + u); };
    AuditResult r;
    r.f1_lo = f(iou_lo);
    r.f1_hi = f(iou_hi);
    const double f1_lo = reported_f1 - half;
    const double f1_hi = reported_f1 + half;
    // Half-open intervals [a,b) intersect iff each starts before the other ends.
    r.consistent = f1_lo < r.f1_hi && r.f1_lo < f1_hi;
    return r;
}

}  // namespace cd
