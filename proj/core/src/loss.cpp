#include "changedet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "changedet/ops.hpp"

namespace cd {

namespace o = ops;

Mask downsample_mask(const Mask& m, int factor) {
    if (m.h % factor != 0 || m.w % factor != 0)
        throw std::invalid_argument("downsample_mask: size not divisible by factor");
    Mask out(m.h / factor, m.w / factor);
    const double cell = static_cast<double>(factor) * factor;
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            int s = 0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    s += m.at(y * factor + dy, x * factor + dx) != 0;
            out.at(y, x) = s / cell > 0.5 ? 1 : 0;
        }
    return out;
}

TargetSet build_targets(const Mask& gt) {
    for (uint8_t v : gt.v)
        if (v > 1) throw std::invalid_argument("build_targets: gt mask is not binary");
    Mask chg = downsample_mask(gt, 4);
    Mask bg(chg.h, chg.w);
    bool any_chg = false, any_bg = false;
    for (size_t i = 0; i < chg.v.size(); ++i) {
        bg.v[i] = chg.v[i] ? 0 : 1;
        any_chg = any_chg || chg.v[i];
        any_bg = any_bg || bg.v[i];
    }
    TargetSet ts;
    if (any_bg) {
        ts.masks.push_back(std::move(bg));
        ts.labels.push_back(0);
    }
    if (any_chg) {
        ts.masks.push_back(std::move(chg));
        ts.labels.push_back(1);
    }
    return ts;
}

namespace {

double softplus(double z) {
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

// mean of the numerically stable BCE over a mask, straight from logits
double mean_bce_logits(const double* z, const Mask& t) {
    double s = 0.0;
    for (size_t i = 0; i < t.v.size(); ++i)
        s += softplus(z[i]) - (t.v[i] ? z[i] : 0.0);
    return s / static_cast<double>(t.v.size());
}

double dice_logits(const double* z, const Mask& t, double eps) {
    double inter = 0.0, ps = 0.0, ts = 0.0;
    for (size_t i = 0; i < t.v.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        inter += t.v[i] ? p : 0.0;
        ps += p;
        ts += t.v[i];
    }
    return 1.0 - (2.0 * inter + eps) / (ps + ts + eps);
}

}  // namespace

double dice_loss_value(const Tensor& prob, const Mask& gt, double eps) {
    if (prob.numel() != static_cast<int64_t>(gt.v.size()))
        throw std::invalid_argument("dice_loss: size mismatch");
    double inter = 0.0, ps = 0.0, ts = 0.0;
    for (size_t i = 0; i < gt.v.size(); ++i) {
        inter += gt.v[i] ? prob[static_cast<int64_t>(i)] : 0.0;
        ps += prob[static_cast<int64_t>(i)];
        ts += gt.v[i];
    }
    return 1.0 - (2.0 * inter + eps) / (ps + ts + eps);
}

Tensor match_cost(const QuerySet& qs, const TargetSet& ts, const LossConfig& cfg) {
    const int Q = qs.class_logits->shape()[0];
    const int T = static_cast<int>(ts.masks.size());
    const int h = qs.mask_logits->shape()[1], w = qs.mask_logits->shape()[2];
    Tensor cost({Q, T});
    for (int q = 0; q < Q; ++q) {
        const double* cl = &qs.class_logits->val.v[static_cast<size_t>(q) * 3];
        const double mx = std::max({cl[0], cl[1], cl[2]});
        const double z = std::exp(cl[0] - mx) + std::exp(cl[1] - mx) + std::exp(cl[2] - mx);
        const double* mz = &qs.mask_logits->val.v[static_cast<size_t>(q) * h * w];
        for (int t = 0; t < T; ++t) {
            const double prob = std::exp(cl[ts.labels[static_cast<size_t>(t)]] - mx) / z;
            cost.at2(q, t) = cfg.class_cost * (-prob) +
                             cfg.mask_bce_cost * mean_bce_logits(mz, ts.masks[static_cast<size_t>(t)]) +
                             cfg.dice_cost * dice_logits(mz, ts.masks[static_cast<size_t>(t)], cfg.dice_eps);
        }
    }
    return cost;
}

namespace {

// Shortest-augmenting-path assignment with potentials, exact for real costs.
// a is n x n row-major; returns col_of_row.
std::vector<int> assign_square(const std::vector<double>& a, int n) {
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, INF);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = -1;
            double delta = INF;
            for (int j = 1; j <= n; ++j)
                if (!used[static_cast<size_t>(j)]) {
                    const double cur = a[static_cast<size_t>(i0 - 1) * n + (j - 1)] -
                                       u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                    if (cur < minv[static_cast<size_t>(j)]) {
                        minv[static_cast<size_t>(j)] = cur;
                        way[static_cast<size_t>(j)] = j0;
                    }
                    if (minv[static_cast<size_t>(j)] < delta) {
                        delta = minv[static_cast<size_t>(j)];
                        j1 = j;
                    }
                }
            for (int j = 0; j <= n; ++j)
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> col_of_row(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)] > 0) col_of_row[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
    return col_of_row;
}

// Optimal cost of assigning every target in `targets` to a distinct query
// from `queries` (|queries| >= |targets|). Dummy columns pad the square.
double optimal_cost(const Tensor& cost, const std::vector<int>& queries,
                    const std::vector<int>& targets) {
    const int n = static_cast<int>(queries.size());
    if (targets.empty()) return 0.0;
    std::vector<double> a(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < static_cast<int>(targets.size()); ++j)
            a[static_cast<size_t>(i) * n + j] =
                cost.at2(queries[static_cast<size_t>(i)], targets[static_cast<size_t>(j)]);
    std::vector<int> col = assign_square(a, n);
    double total = 0.0;
    for (int i = 0; i < n; ++i)
        if (col[static_cast<size_t>(i)] < static_cast<int>(targets.size()))
            total += cost.at2(queries[static_cast<size_t>(i)],
                              targets[static_cast<size_t>(col[static_cast<size_t>(i)])]);
    return total;
}

}  // namespace

MatchResult hungarian(const Tensor& cost) {
    const int Q = cost.shape[0], T = cost.shape[1];
    if (T > Q) throw std::invalid_argument("hungarian: more targets than queries");
    MatchResult res;
    if (T == 0) return res;
    for (double c : cost.v)
        if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
    std::vector<int> all_q(static_cast<size_t>(Q));
    for (int i = 0; i < Q; ++i) all_q[static_cast<size_t>(i)] = i;
    std::vector<int> all_t(static_cast<size_t>(T));
    for (int j = 0; j < T; ++j) all_t[static_cast<size_t>(j)] = j;
    const double best = optimal_cost(cost, all_q, all_t);
    const double tol = 1e-9 * (1.0 + std::abs(best));

    // Lexicographically smallest sorted pair list among all optima: walk the
    // queries in order, greedily fixing the smallest target whose completion
    // stays optimal; re-solve the remainder to test each candidate.
    std::vector<int> remaining = all_t;
    double fixed = 0.0;
    for (int q = 0; q < Q && !remaining.empty(); ++q) {
        std::vector<int> tail_q;
        for (int i = q + 1; i < Q; ++i) tail_q.push_back(i);
        bool taken = false;
        for (size_t ti = 0; ti < remaining.size(); ++ti) {
            const int t = remaining[ti];
            if (static_cast<int>(remaining.size()) - 1 > static_cast<int>(tail_q.size()))
                break;  // not enough queries left if we consume one on (q,t)
            std::vector<int> rest = remaining;
            rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(ti));
            const double sub = optimal_cost(cost, tail_q, rest);
            if (fixed + cost.at2(q, t) + sub <= best + tol) {
                res.pairs.emplace_back(q, t);
                fixed += cost.at2(q, t);
                remaining = std::move(rest);
                taken = true;
                break;
            }
        }
        if (!taken) {
            // q stays unmatched; feasible because t's can still fit in the tail
            if (static_cast<int>(remaining.size()) > Q - q - 1)
                throw std::logic_error("hungarian: reconstruction failed");
        }
    }
    res.total_cost = fixed;
    return res;
}

SetLossOut set_loss(const QuerySet& qs, const TargetSet& ts, const MatchResult& match,
                    const LossConfig& cfg) {
    const int Q = qs.class_logits->shape()[0];
    const int h = qs.mask_logits->shape()[1], w = qs.mask_logits->shape()[2];
    std::vector<int> labels(static_cast<size_t>(Q), 2);  // no-object
    std::vector<double> row_w(static_cast<size_t>(Q), cfg.class_w * cfg.noobj_class_weight);
    for (const auto& [q, t] : match.pairs) {
        labels[static_cast<size_t>(q)] = ts.labels[static_cast<size_t>(t)];
        row_w[static_cast<size_t>(q)] = cfg.class_w;
    }
    Var class_term = o::cross_entropy_rows(qs.class_logits, labels, row_w);
    std::vector<Var> parts{class_term};
    double bce_sum = 0.0, dice_sum = 0.0;
    for (const auto& [q, t] : match.pairs) {
        const Mask& tm = ts.masks[static_cast<size_t>(t)];
        Tensor tgt({h, w});
        for (size_t i = 0; i < tm.v.size(); ++i) tgt[static_cast<int64_t>(i)] = tm.v[i];
        Var mq = o::slice_rows(qs.mask_logits, q, 1);
        Var bce = o::bce_with_logits_mean(mq, tgt);
        Var dice = o::dice_with_logits(mq, tgt, cfg.dice_eps);
        bce_sum += bce->val[0];
        dice_sum += dice->val[0];
        parts.push_back(o::smul(bce, cfg.bce_w));
        parts.push_back(o::smul(dice, cfg.dice_w));
    }
    SetLossOut out;
    out.class_term = class_term->val[0];
    out.bce_term = bce_sum;
    out.dice_term = dice_sum;
    out.total = o::smul(parts.size() == 1 ? parts[0] : o::add_scalars(parts),
                        1.0 / static_cast<double>(Q));
    return out;
}

std::pair<double, double> auto_pixel_weights(int64_t bg_count, int64_t chg_count) {
    const double total = static_cast<double>(bg_count + chg_count);
    if (total <= 0.0) return {1.0, 1.0};
    const bool has_bg = bg_count > 0, has_chg = chg_count > 0;
    if (!has_bg || !has_chg) return {1.0, 1.0};  // absent class pins both at 1
    const double raw_bg = total / static_cast<double>(bg_count);
    const double raw_chg = total / static_cast<double>(chg_count);
    const double k = 2.0 / (raw_bg + raw_chg);
    return {k * raw_bg, k * raw_chg};
}

Var pixel_loss(const Var& dense, const Mask& gt4, double w_bg, double w_chg) {
    if (dense->shape()[0] != gt4.h || dense->shape()[1] != gt4.w)
        throw std::invalid_argument("pixel_loss: grid mismatch");
    return o::weighted_pixel_ce(dense, gt4.v, w_bg, w_chg);
}

TotalLossOut total_loss(const QuerySet& qs, const Var& dense, const Mask& gt_fullres,
                        const LossConfig& cfg) {
    TotalLossOut out;
    TargetSet ts = build_targets(gt_fullres);
    Tensor cost = match_cost(qs, ts, cfg);
    out.match = hungarian(cost);
    out.set_detail = set_loss(qs, ts, out.match, cfg);
    out.set = out.set_detail.total;
    Mask gt4 = downsample_mask(gt_fullres, 4);
    if (cfg.auto_pixel_weights) {
        int64_t chg = 0;
        for (uint8_t v : gt4.v) chg += v != 0;
        auto [wb, wc] = auto_pixel_weights(static_cast<int64_t>(gt4.v.size()) - chg, chg);
        out.w_bg = wb;
        out.w_chg = wc;
    } else {
        out.w_bg = cfg.w_bg;
        out.w_chg = cfg.w_chg;
    }
    out.pixel = pixel_loss(dense, gt4, out.w_bg, out.w_chg);
    out.total = o::add(o::smul(out.set, cfg.lambda_set), o::smul(out.pixel, cfg.lambda_pixel));
    return out;
}

}  // namespace cd
