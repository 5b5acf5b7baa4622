#pragma once

#include <utility>
#include <vector>

#include "changedet/decoder.hpp"
#include "changedet/metrics.hpp"

namespace cd {

struct LossConfig {
    double lambda_set = 0.1, lambda_pixel = 10.0;
    // matching costs
    double class_cost = 2.0, mask_bce_cost = 5.0, dice_cost = 5.0;
    // loss term weights
    double class_w = 2.0, bce_w = 5.0, dice_w = 5.0;
    double noobj_class_weight = 0.1;
    bool auto_pixel_weights = true;  // inverse class frequency, mean-normalized to 1
    double w_bg = 1.0, w_chg = 1.0;  // used when auto is off
    double dice_eps = 1.0;
};

// Binary-semantic targets on the stride-4 grid: a chg mask if any change
// pixel survives downsampling, a bg mask if any background does.
struct TargetSet {
    std::vector<Mask> masks;
    std::vector<int> labels;  // 0 = bg, 1 = chg
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query, target), injective
    double total_cost = 0.0;
};

// Area-average over factor x factor cells, then > 0.5.
Mask downsample_mask(const Mask& m, int factor);

TargetSet build_targets(const Mask& gt);  // gt at full resolution; throws on non-binary

// cost(q,t) = class_cost*(-softmax(class)[label_t])
//           + mask_bce_cost*meanBCE(sigmoid(m_q), mask_t)
//           + dice_cost*dice(sigmoid(m_q), mask_t).  Value-only.
Tensor match_cost(const QuerySet& qs, const TargetSet& ts, const LossConfig& cfg);

// Min-cost assignment of every column (target) to a distinct row (query),
// T <= Q. Optimal total; among optima, the lexicographically smallest sorted
// pair list is returned.
MatchResult hungarian(const Tensor& cost);

struct SetLossOut {
    Var total;  // scalar
    double class_term = 0.0, bce_term = 0.0, dice_term = 0.0;  // pre-averaged sums
};
// Matched queries: class_w*CE(label) + bce_w*meanBCE + dice_w*dice; unmatched:
// class_w*noobj_class_weight*CE(no-object); everything averaged over Q.
SetLossOut set_loss(const QuerySet& qs, const TargetSet& ts, const MatchResult& match,
                    const LossConfig& cfg);

// Spec form of the dice loss on probabilities (value-only reference;
// training uses the logits form inside set_loss).
double dice_loss_value(const Tensor& prob, const Mask& gt, double eps);

// Inverse-frequency weights normalized to mean 1; an absent class gets 1.
std::pair<double, double> auto_pixel_weights(int64_t bg_count, int64_t chg_count);

Var pixel_loss(const Var& dense, const Mask& gt4, double w_bg, double w_chg);

struct TotalLossOut {
    Var total, set, pixel;
    MatchResult match;
    SetLossOut set_detail;
    double w_bg = 1.0, w_chg = 1.0;
};
// Matching is recomputed here and frozen for differentiation.
TotalLossOut total_loss(const QuerySet& qs, const Var& dense, const Mask& gt_fullres,
                        const LossConfig& cfg);

}  // namespace cd
