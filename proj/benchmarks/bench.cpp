#include <benchmark/benchmark.h>

#include "changedet/interaction.hpp"
#include "changedet/loss.hpp"
#include "changedet/ops.hpp"

using namespace cd;
using namespace cd::ops;

namespace {

Tensor rand_tensor(Shape s, Rng& rng) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = rng.uniform(-1.0, 1.0);
    return t;
}

void bm_conv2d_fwd_bwd(benchmark::State& state) {
    Rng rng(7);
    Tensor xt = rand_tensor({64, 64, 32}, rng);
    Tensor wt = rand_tensor({3, 3, 32, 32}, rng);
    Tensor bt = rand_tensor({32}, rng);
    for (auto _ : state) {
        Var x = leaf(xt, true), w = leaf(wt, true), b = leaf(bt, true);
        Var y = conv2d(x, w, b, 1, 1, 1);
        Var l = sum_all(y);
        backward(l);
        benchmark::DoNotOptimize(w->grad.v.data());
    }
}
BENCHMARK(bm_conv2d_fwd_bwd);

void bm_deform_attend(benchmark::State& state) {
    InteractionConfig cfg;
    cfg.core = "deform";
    cfg.heads = 4;
    cfg.points = 4;
    ParamStore store;
    Rng rng(11);
    Interaction inter;
    inter.build(cfg, {32, 32, 32, 32}, store, rng);
    Tensor qt = rand_tensor({16, 16, 32}, rng);
    Tensor vt = rand_tensor({16, 16, 32}, rng);
    for (auto _ : state) {
        Var out = inter.attend(0, constant(qt), constant(vt));
        benchmark::DoNotOptimize(out->val.v.data());
    }
}
BENCHMARK(bm_deform_attend);

void bm_cross_attend(benchmark::State& state) {
    InteractionConfig cfg;
    cfg.core = "cross";
    cfg.heads = 4;
    ParamStore store;
    Rng rng(11);
    Interaction inter;
    inter.build(cfg, {32, 32, 32, 32}, store, rng);
    Tensor qt = rand_tensor({16, 16, 32}, rng);
    Tensor vt = rand_tensor({16, 16, 32}, rng);
    for (auto _ : state) {
        Var out = inter.attend(0, constant(qt), constant(vt));
        benchmark::DoNotOptimize(out->val.v.data());
    }
}
BENCHMARK(bm_cross_attend);

void bm_hungarian(benchmark::State& state) {
    const int q = static_cast<int>(state.range(0));
    Rng rng(23);
    Tensor cost({q, q});
    for (auto& x : cost.v) x = rng.u01();
    for (auto _ : state) {
        MatchResult m = hungarian(cost);
        benchmark::DoNotOptimize(m.total_cost);
    }
}
BENCHMARK(bm_hungarian)->Arg(8)->Arg(32)->Arg(64);

void bm_lse_aggregate(benchmark::State& state) {
    Rng rng(31);
    Tensor pt = rand_tensor({8, 2}, rng);
    Tensor mt = rand_tensor({8, 64, 64}, rng);
    for (auto _ : state) {
        Var p = leaf(pt, true), m = leaf(mt, true);
        Var out = aggregate_lse_op(p, m);
        Var l = sum_all(out);
        backward(l);
        benchmark::DoNotOptimize(m->grad.v.data());
    }
}
BENCHMARK(bm_lse_aggregate);

}  // namespace

BENCHMARK_MAIN();
