#include "changedet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cd::ops {

using detail::make_node;

namespace {

void check_same(const Var& a, const Var& b, const char* op) {
    if (!same_shape(a->shape(), b->shape()))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

void accum(const Var& p, const Tensor& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        accum(a, n.grad);
        accum(b, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        accum(a, n.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Tensor out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

Var smul(const Var& a, double c) {
    Tensor out = a->val;
    for (double& x : out.v) x *= c;
    return make_node(std::move(out), {a}, [a, c](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * c;
    });
}

Var sadd(const Var& a, double c) {
    Tensor out = a->val;
    for (double& x : out.v) x += c;
    return make_node(std::move(out), {a}, [a](Node& n) { accum(a, n.grad); });
}

Var scale_by(const Var& x, const Var& s) {
    if (s->numel() != 1) throw std::invalid_argument("scale_by: scale must be scalar");
    double c = s->val[0];
    Tensor out = x->val;
    for (double& v : out.v) v *= c;
    return make_node(std::move(out), {x, s}, [x, s, c](Node& n) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i] * c;
        }
        if (s->requires_grad) {
            s->ensure_grad();
            double acc = 0.0;
            for (int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i] * x->val[i];
            s->grad[0] += acc;
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.v) v = v > 0.0 ? v : 0.0;
    return make_node(std::move(out), {x}, [x](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            if (x->val[i] > 0.0) x->grad[i] += n.grad[i];
    });
}

Var gelu(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.v) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return make_node(std::move(out), {x}, [x](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            double v = x->val[i];
            double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
                       v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
            x->grad[i] += n.grad[i] * d;
        }
    });
}

Var sigmoid(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.v) v = 1.0 / (1.0 + std::exp(-v));
    return make_node(std::move(out), {x}, [x](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            double s = n.val[i];
            x->grad[i] += n.grad[i] * s * (1.0 - s);
        }
    });
}

Var vlog(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.v) v = std::log(v);
    return make_node(std::move(out), {x}, [x](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[i] += n.grad[i] / x->val[i];
    });
}

Var mul_channel(const Var& x, const Var& gate_c) {
    const int H = x->shape()[0], W = x->shape()[1], C = x->shape()[2];
    if (gate_c->numel() != C) throw std::invalid_argument("mul_channel: gate size");
    Tensor out = x->val;
    for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p)
        for (int c = 0; c < C; ++c) out[p * C + c] *= gate_c->val[c];
    return make_node(std::move(out), {x, gate_c}, [x, gate_c, H, W, C](Node& n) {
        int64_t pixels = static_cast<int64_t>(H) * W;
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t p = 0; p < pixels; ++p)
                for (int c = 0; c < C; ++c)
                    x->grad[p * C + c] += n.grad[p * C + c] * gate_c->val[c];
        }
        if (gate_c->requires_grad) {
            gate_c->ensure_grad();
            for (int64_t p = 0; p < pixels; ++p)
                for (int c = 0; c < C; ++c)
                    gate_c->grad[c] += n.grad[p * C + c] * x->val[p * C + c];
        }
    });
}

Var mul_spatial(const Var& x, const Var& gate_hw) {
    const int H = x->shape()[0], W = x->shape()[1], C = x->shape()[2];
    if (gate_hw->numel() != static_cast<int64_t>(H) * W)
        throw std::invalid_argument("mul_spatial: gate size");
    Tensor out = x->val;
    for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p)
        for (int c = 0; c < C; ++c) out[p * C + c] *= gate_hw->val[p];
    return make_node(std::move(out), {x, gate_hw}, [x, gate_hw, H, W, C](Node& n) {
        int64_t pixels = static_cast<int64_t>(H) * W;
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t p = 0; p < pixels; ++p)
                for (int c = 0; c < C; ++c)
                    x->grad[p * C + c] += n.grad[p * C + c] * gate_hw->val[p];
        }
        if (gate_hw->requires_grad) {
            gate_hw->ensure_grad();
            for (int64_t p = 0; p < pixels; ++p) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c) acc += n.grad[p * C + c] * x->val[p * C + c];
                gate_hw->grad[p] += acc;
            }
        }
    });
}

Var reshape(const Var& x, Shape s) {
    if (Tensor::count(s) != x->numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out(std::move(s), x->val.v);
    return make_node(std::move(out), {x}, [x](Node& n) { accum(x, n.grad); });
}

Var slice_cols(const Var& x, int c0, int len) {
    const int N = x->shape()[0], C = x->shape()[1];
    if (c0 < 0 || c0 + len > C) throw std::invalid_argument("slice_cols: range");
    Tensor out({N, len});
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < len; ++c) out.at2(r, c) = x->val.at2(r, c0 + c);
    return make_node(std::move(out), {x}, [x, c0, len, N](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const int C = x->shape()[1];
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < len; ++c)
                x->grad[static_cast<int64_t>(r) * C + c0 + c] += n.grad.at2(r, c);
    });
}

Var slice_rows(const Var& x, int r0, int len) {
    const int N = x->shape()[0];
    if (r0 < 0 || r0 + len > N) throw std::invalid_argument("slice_rows: range");
    const int64_t row = x->numel() / N;
    Shape s = x->shape();
    s[0] = len;
    Tensor out(s);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->val[r0 * row + i];
    return make_node(std::move(out), {x}, [x, r0, row](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad[r0 * row + i] += n.grad[i];
    });
}

Var concat_lastdim(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_lastdim: empty");
    const int N = xs[0]->shape()[0];
    int total = 0;
    for (const auto& x : xs) {
        if (x->shape()[0] != N) throw std::invalid_argument("concat_lastdim: row mismatch");
        total += x->shape()[1];
    }
    Tensor out({N, total});
    int off = 0;
    for (const auto& x : xs) {
        const int d = x->shape()[1];
        for (int r = 0; r < N; ++r)
            for (int c = 0; c < d; ++c) out.at2(r, off + c) = x->val.at2(r, c);
        off += d;
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node(std::move(out), parents, [xs, N, total](Node& n) {
        int off = 0;
        for (const auto& x : xs) {
            const int d = x->shape()[1];
            if (x->requires_grad) {
                x->ensure_grad();
                for (int r = 0; r < N; ++r)
                    for (int c = 0; c < d; ++c)
                        x->grad[static_cast<int64_t>(r) * d + c] += n.grad.at2(r, off + c);
            }
            off += d;
        }
    });
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty");
    const int C = xs[0]->shape()[1];
    int total = 0;
    for (const auto& x : xs) {
        if (x->shape()[1] != C) throw std::invalid_argument("concat_rows: col mismatch");
        total += x->shape()[0];
    }
    Tensor out({total, C});
    int64_t off = 0;
    for (const auto& x : xs) {
        for (int64_t i = 0; i < x->numel(); ++i) out[off + i] = x->val[i];
        off += x->numel();
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node(std::move(out), parents, [xs](Node& n) {
        int64_t off = 0;
        for (const auto& x : xs) {
            if (x->requires_grad) {
                x->ensure_grad();
                for (int64_t i = 0; i < x->numel(); ++i) x->grad[i] += n.grad[off + i];
            }
            off += x->numel();
        }
    });
}

Var concat_c(const Var& a, const Var& b) {
    const int H = a->shape()[0], W = a->shape()[1];
    if (b->shape()[0] != H || b->shape()[1] != W)
        throw std::invalid_argument("concat_c: spatial mismatch");
    const int Ca = a->shape()[2], Cb = b->shape()[2];
    Tensor out({H, W, Ca + Cb});
    const int64_t pixels = static_cast<int64_t>(H) * W;
    for (int64_t p = 0; p < pixels; ++p) {
        for (int c = 0; c < Ca; ++c) out[p * (Ca + Cb) + c] = a->val[p * Ca + c];
        for (int c = 0; c < Cb; ++c) out[p * (Ca + Cb) + Ca + c] = b->val[p * Cb + c];
    }
    return make_node(std::move(out), {a, b}, [a, b, pixels, Ca, Cb](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t p = 0; p < pixels; ++p)
                for (int c = 0; c < Ca; ++c)
                    a->grad[p * Ca + c] += n.grad[p * (Ca + Cb) + c];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t p = 0; p < pixels; ++p)
                for (int c = 0; c < Cb; ++c)
                    b->grad[p * Cb + c] += n.grad[p * (Ca + Cb) + Ca + c];
        }
    });
}

Var add_rowvec(const Var& x, const Var& r) {
    const int N = x->shape()[0];
    const int C = static_cast<int>(x->numel() / N);
    if (r->numel() != C) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out = x->val;
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) out[static_cast<int64_t>(i) * C + c] += r->val[c];
    return make_node(std::move(out), {x, r}, [x, r, N, C](Node& n) {
        accum(x, n.grad);
        if (r->requires_grad) {
            r->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int c = 0; c < C; ++c) r->grad[c] += n.grad[static_cast<int64_t>(i) * C + c];
        }
    });
}

namespace {

Var linear_impl(const Var& x, const Var& w, const Var& b, bool has_bias) {
    const int N = x->shape()[0], Ci = x->shape()[1];
    if (w->shape()[0] != Ci) throw std::invalid_argument("linear: weight rows != input cols");
    const int Co = w->shape()[1];
    Tensor out({N, Co});
    for (int r = 0; r < N; ++r) {
        double* orow = &out.v[static_cast<size_t>(r) * Co];
        if (has_bias)
            for (int c = 0; c < Co; ++c) orow[c] = b->val[c];
        for (int k = 0; k < Ci; ++k) {
            const double xv = x->val.at2(r, k);
            const double* wrow = &w->val.v[static_cast<size_t>(k) * Co];
            for (int c = 0; c < Co; ++c) orow[c] += xv * wrow[c];
        }
    }
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), parents, [x, w, b, has_bias, N, Ci, Co](Node& n) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int r = 0; r < N; ++r) {
                const double* grow = &n.grad.v[static_cast<size_t>(r) * Co];
                for (int k = 0; k < Ci; ++k) {
                    const double* wrow = &w->val.v[static_cast<size_t>(k) * Co];
                    double acc = 0.0;
                    for (int c = 0; c < Co; ++c) acc += grow[c] * wrow[c];
                    x->grad[static_cast<int64_t>(r) * Ci + k] += acc;
                }
            }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (int r = 0; r < N; ++r) {
                const double* grow = &n.grad.v[static_cast<size_t>(r) * Co];
                for (int k = 0; k < Ci; ++k) {
                    const double xv = x->val.at2(r, k);
                    double* gw = &w->grad.v[static_cast<size_t>(k) * Co];
                    for (int c = 0; c < Co; ++c) gw[c] += xv * grow[c];
                }
            }
        }
        if (has_bias && b->requires_grad) {
            b->ensure_grad();
            for (int r = 0; r < N; ++r)
                for (int c = 0; c < Co; ++c) b->grad[c] += n.grad.at2(r, c);
        }
    });
}

}  // namespace

Var linear(const Var& x, const Var& w, const Var& b) { return linear_impl(x, w, b, true); }
Var linear_nobias(const Var& x, const Var& w) { return linear_impl(x, w, nullptr, false); }

Var matmul(const Var& a, const Var& b) {
    const int n = a->shape()[0], k = a->shape()[1];
    if (b->shape()[0] != k) throw std::invalid_argument("matmul: inner dim");
    const int m = b->shape()[1];
    Tensor out({n, m});
    for (int r = 0; r < n; ++r) {
        double* orow = &out.v[static_cast<size_t>(r) * m];
        for (int kk = 0; kk < k; ++kk) {
            const double av = a->val.at2(r, kk);
            const double* brow = &b->val.v[static_cast<size_t>(kk) * m];
            for (int c = 0; c < m; ++c) orow[c] += av * brow[c];
        }
    }
    return make_node(std::move(out), {a, b}, [a, b, n, k, m](Node& nd) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int kk = 0; kk < k; ++kk) {
                    const double* brow = &b->val.v[static_cast<size_t>(kk) * m];
                    const double* grow = &nd.grad.v[static_cast<size_t>(r) * m];
                    double acc = 0.0;
                    for (int c = 0; c < m; ++c) acc += grow[c] * brow[c];
                    a->grad[static_cast<int64_t>(r) * k + kk] += acc;
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int kk = 0; kk < k; ++kk) {
                    const double av = a->val.at2(r, kk);
                    const double* grow = &nd.grad.v[static_cast<size_t>(r) * m];
                    double* gb = &b->grad.v[static_cast<size_t>(kk) * m];
                    for (int c = 0; c < m; ++c) gb[c] += av * grow[c];
                }
        }
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    const int n = a->shape()[0], k = a->shape()[1];
    if (b->shape()[1] != k) throw std::invalid_argument("matmul_nt: inner dim");
    const int m = b->shape()[0];
    Tensor out({n, m});
    for (int r = 0; r < n; ++r) {
        const double* arow = &a->val.v[static_cast<size_t>(r) * k];
        for (int c = 0; c < m; ++c) {
            const double* brow = &b->val.v[static_cast<size_t>(c) * k];
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            out.at2(r, c) = acc;
        }
    }
    return make_node(std::move(out), {a, b}, [a, b, n, k, m](Node& nd) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < m; ++c) {
                    const double g = nd.grad.at2(r, c);
                    const double* brow = &b->val.v[static_cast<size_t>(c) * k];
                    double* ga = &a->grad.v[static_cast<size_t>(r) * k];
                    for (int kk = 0; kk < k; ++kk) ga[kk] += g * brow[kk];
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < m; ++c) {
                    const double g = nd.grad.at2(r, c);
                    const double* arow = &a->val.v[static_cast<size_t>(r) * k];
                    double* gb = &b->grad.v[static_cast<size_t>(c) * k];
                    for (int kk = 0; kk < k; ++kk) gb[kk] += g * arow[kk];
                }
        }
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int groups) {
    const int H = x->shape()[0], W = x->shape()[1], Ci = x->shape()[2];
    const int kh = w->shape()[0], kw = w->shape()[1], cig = w->shape()[2], Co = w->shape()[3];
    if (cig * groups != Ci)
        throw std::invalid_argument("conv2d: Cin/groups mismatch " + shape_str(x->shape()) +
                                    " vs " + shape_str(w->shape()));
    if (Co % groups != 0) throw std::invalid_argument("conv2d: Cout % groups != 0");
    const int cog = Co / groups;
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const bool has_bias = b != nullptr;
    Tensor out({Ho, Wo, Co});
    for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
            double* orow = &out.v[(static_cast<size_t>(oy) * Wo + ox) * Co];
            if (has_bias)
                for (int c = 0; c < Co; ++c) orow[c] = b->val[c];
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= W) continue;
                    const double* xrow = &x->val.v[(static_cast<size_t>(iy) * W + ix) * Ci];
                    const double* wbase =
                        &w->val.v[(static_cast<size_t>(ky) * kw + kx) * cig * Co];
                    for (int g = 0; g < groups; ++g)
                        for (int ci = 0; ci < cig; ++ci) {
                            const double xv = xrow[g * cig + ci];
                            const double* wrow = wbase + static_cast<size_t>(ci) * Co + g * cog;
                            double* oseg = orow + g * cog;
                            for (int c = 0; c < cog; ++c) oseg[c] += xv * wrow[c];
                        }
                }
            }
        }
    std::vector<Var> parents = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(
        std::move(out), parents,
        [x, w, b, has_bias, stride, pad, groups, H, W, Ci, kh, kw, cig, Co, cog, Ho,
         Wo](Node& n) {
            const bool gx = x->requires_grad, gw = w->requires_grad;
            const bool gb = has_bias && b->requires_grad;
            if (gx) x->ensure_grad();
            if (gw) w->ensure_grad();
            if (gb) b->ensure_grad();
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const double* grow = &n.grad.v[(static_cast<size_t>(oy) * Wo + ox) * Co];
                    if (gb)
                        for (int c = 0; c < Co; ++c) b->grad[c] += grow[c];
                    if (!gx && !gw) continue;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            const size_t xoff = (static_cast<size_t>(iy) * W + ix) * Ci;
                            const size_t woff = (static_cast<size_t>(ky) * kw + kx) * cig * Co;
                            for (int g = 0; g < groups; ++g)
                                for (int ci = 0; ci < cig; ++ci) {
                                    const size_t xi = xoff + g * cig + ci;
                                    const size_t wi = woff + static_cast<size_t>(ci) * Co +
                                                      static_cast<size_t>(g) * cog;
                                    const double* goseg = grow + g * cog;
                                    if (gx) {
                                        const double* wrow = &w->val.v[wi];
                                        double acc = 0.0;
                                        for (int c = 0; c < cog; ++c) acc += goseg[c] * wrow[c];
                                        x->grad[xi] += acc;
                                    }
                                    if (gw) {
                                        const double xv = x->val[xi];
                                        double* wgrow = &w->grad.v[wi];
                                        for (int c = 0; c < cog; ++c) wgrow[c] += xv * goseg[c];
                                    }
                                }
                        }
                    }
                }
        });
}

Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int C = x->shape().back();
    const int64_t rows = x->numel() / C;
    if (gamma->numel() != C || beta->numel() != C)
        throw std::invalid_argument("layernorm: affine size");
    Tensor out(x->shape());
    Tensor xhat(x->shape());  // cached for backward
    Tensor inv_sd({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = &x->val.v[static_cast<size_t>(r) * C];
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xr[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= C;
        const double isd = 1.0 / std::sqrt(var + eps);
        inv_sd[r] = isd;
        for (int c = 0; c < C; ++c) {
            const double xh = (xr[c] - mu) * isd;
            xhat[r * C + c] = xh;
            out[r * C + c] = xh * gamma->val[c] + beta->val[c];
        }
    }
    return make_node(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, C, rows, xhat = std::move(xhat),
                      inv_sd = std::move(inv_sd)](Node& n) {
                         if (gamma->requires_grad) {
                             gamma->ensure_grad();
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int c = 0; c < C; ++c)
                                     gamma->grad[c] += n.grad[r * C + c] * xhat[r * C + c];
                         }
                         if (beta->requires_grad) {
                             beta->ensure_grad();
                             for (int64_t r = 0; r < rows; ++r)
                                 for (int c = 0; c < C; ++c) beta->grad[c] += n.grad[r * C + c];
                         }
                         if (!x->requires_grad) return;
                         x->ensure_grad();
                         for (int64_t r = 0; r < rows; ++r) {
                             double mean_g = 0.0, mean_gx = 0.0;
                             for (int c = 0; c < C; ++c) {
                                 const double gy = n.grad[r * C + c] * gamma->val[c];
                                 mean_g += gy;
                                 mean_gx += gy * xhat[r * C + c];
                             }
                             mean_g /= C;
                             mean_gx /= C;
                             for (int c = 0; c < C; ++c) {
                                 const double gy = n.grad[r * C + c] * gamma->val[c];
                                 x->grad[r * C + c] +=
                                     (gy - mean_g - xhat[r * C + c] * mean_gx) * inv_sd[r];
                             }
                         }
                     });
}

Var softmax_lastdim(const Var& x) {
    const int K = x->shape().back();
    const int64_t rows = x->numel() / K;
    Tensor out(x->shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = &x->val.v[static_cast<size_t>(r) * K];
        double mx = xr[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(xr[k] - mx);
        for (int k = 0; k < K; ++k) out[r * K + k] = std::exp(xr[k] - mx) / z;
    }
    return make_node(std::move(out), {x}, [x, K, rows](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int k = 0; k < K; ++k) dot += n.grad[r * K + k] * n.val[r * K + k];
            for (int k = 0; k < K; ++k)
                x->grad[r * K + k] += n.val[r * K + k] * (n.grad[r * K + k] - dot);
        }
    });
}

Var global_avgpool(const Var& x) {
    const int H = x->shape()[0], W = x->shape()[1], C = x->shape()[2];
    const int64_t pixels = static_cast<int64_t>(H) * W;
    Tensor out({C});
    for (int64_t p = 0; p < pixels; ++p)
        for (int c = 0; c < C; ++c) out[c] += x->val[p * C + c];
    for (int c = 0; c < C; ++c) out[c] /= static_cast<double>(pixels);
    return make_node(std::move(out), {x}, [x, pixels, C](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const double inv = 1.0 / static_cast<double>(pixels);
        for (int64_t p = 0; p < pixels; ++p)
            for (int c = 0; c < C; ++c) x->grad[p * C + c] += n.grad[c] * inv;
    });
}

Var global_maxpool(const Var& x) {
    const int H = x->shape()[0], W = x->shape()[1], C = x->shape()[2];
    const int64_t pixels = static_cast<int64_t>(H) * W;
    Tensor out({C});
    std::vector<int64_t> argmax(C, 0);
    for (int c = 0; c < C; ++c) out[c] = x->val[c];
    for (int64_t p = 1; p < pixels; ++p)
        for (int c = 0; c < C; ++c)
            if (x->val[p * C + c] > out[c]) {
                out[c] = x->val[p * C + c];
                argmax[c] = p;
            }
    return make_node(std::move(out), {x}, [x, C, argmax = std::move(argmax)](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int c = 0; c < C; ++c) x->grad[argmax[c] * C + c] += n.grad[c];
    });
}

Var upsample_nearest2x(const Var& x) {
    const int H = x->shape()[0], W = x->shape()[1], C = x->shape()[2];
    Tensor out({2 * H, 2 * W, C});
    for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
            for (int c = 0; c < C; ++c) out.at3(y, xx, c) = x->val.at3(y / 2, xx / 2, c);
    return make_node(std::move(out), {x}, [x, H, W, C](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int y = 0; y < 2 * H; ++y)
            for (int xx = 0; xx < 2 * W; ++xx)
                for (int c = 0; c < C; ++c)
                    x->grad[(static_cast<int64_t>(y / 2) * W + xx / 2) * C + c] +=
                        n.grad.at3(y, xx, c);
    });
}

Var bilinear_sample(const Var& value, const Var& points, int c0, int len) {
    const int H = value->shape()[0], W = value->shape()[1], C = value->shape()[2];
    if (len < 0) len = C - c0;
    if (c0 < 0 || c0 + len > C) throw std::invalid_argument("bilinear_sample: channel range");
    const int N = points->shape()[0];
    Tensor out({N, len});
    for (int i = 0; i < N; ++i) {
        const double yc = std::clamp(points->val.at2(i, 0), 0.0, static_cast<double>(H - 1));
        const double xc = std::clamp(points->val.at2(i, 1), 0.0, static_cast<double>(W - 1));
        const int y0 = static_cast<int>(std::floor(yc)), x0 = static_cast<int>(std::floor(xc));
        const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
        const double fy = yc - y0, fx = xc - x0;
        for (int c = 0; c < len; ++c) {
            const double v00 = value->val.at3(y0, x0, c0 + c);
            const double v01 = value->val.at3(y0, x1, c0 + c);
            const double v10 = value->val.at3(y1, x0, c0 + c);
            const double v11 = value->val.at3(y1, x1, c0 + c);
            out.at2(i, c) = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                            fy * ((1 - fx) * v10 + fx * v11);
        }
    }
    return make_node(std::move(out), {value, points},
                     [value, points, H, W, C, c0, len, N](Node& n) {
                         for (int i = 0; i < N; ++i) {
                             const double yraw = points->val.at2(i, 0);
                             const double xraw = points->val.at2(i, 1);
                             const double yc = std::clamp(yraw, 0.0, static_cast<double>(H - 1));
                             const double xc = std::clamp(xraw, 0.0, static_cast<double>(W - 1));
                             const int y0 = static_cast<int>(std::floor(yc));
                             const int x0 = static_cast<int>(std::floor(xc));
                             const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
                             const double fy = yc - y0, fx = xc - x0;
                             double gy = 0.0, gx = 0.0;
                             for (int c = 0; c < len; ++c) {
                                 const double g = n.grad.at2(i, c);
                                 const double v00 = value->val.at3(y0, x0, c0 + c);
                                 const double v01 = value->val.at3(y0, x1, c0 + c);
                                 const double v10 = value->val.at3(y1, x0, c0 + c);
                                 const double v11 = value->val.at3(y1, x1, c0 + c);
                                 if (value->requires_grad) {
                                     value->ensure_grad();
                                     value->grad[(static_cast<int64_t>(y0) * W + x0) * C + c0 +
                                                 c] += g * (1 - fy) * (1 - fx);
                                     value->grad[(static_cast<int64_t>(y0) * W + x1) * C + c0 +
                                                 c] += g * (1 - fy) * fx;
                                     value->grad[(static_cast<int64_t>(y1) * W + x0) * C + c0 +
                                                 c] += g * fy * (1 - fx);
                                     value->grad[(static_cast<int64_t>(y1) * W + x1) * C + c0 +
                                                 c] += g * fy * fx;
                                 }
                                 gy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                                 gx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                             }
                             if (points->requires_grad) {
                                 points->ensure_grad();
                                 // Clamped coordinates have zero slope outside the interior.
                                 if (yraw > 0.0 && yraw < H - 1)
                                     points->grad[static_cast<int64_t>(i) * 2 + 0] += gy;
                                 if (xraw > 0.0 && xraw < W - 1)
                                     points->grad[static_cast<int64_t>(i) * 2 + 1] += gx;
                             }
                         }
                     });
}

Var sum_all(const Var& x) {
    double s = 0.0;
    for (double v : x->val.v) s += v;
    return make_node(Tensor::scalar(s), {x}, [x](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < x->numel(); ++i) x->grad[i] += n.grad[0];
    });
}

Var mean_all(const Var& x) { return smul(sum_all(x), 1.0 / static_cast<double>(x->numel())); }

Var add_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_scalars: empty");
    double s = 0.0;
    for (const auto& x : xs) s += x->val[0];
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node(Tensor::scalar(s), parents, [xs](Node& n) {
        for (const auto& x : xs)
            if (x->requires_grad) {
                x->ensure_grad();
                x->grad[0] += n.grad[0];
            }
    });
}

namespace {
double softplus(double z) {
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}
double sigm(double z) { return 1.0 / (1.0 + std::exp(-z)); }
}  // namespace

Var bce_with_logits_mean(const Var& logits, const Tensor& targets) {
    if (logits->numel() != targets.numel())
        throw std::invalid_argument("bce: size mismatch");
    const int64_t n = logits->numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) loss += softplus(logits->val[i]) - targets[i] * logits->val[i];
    loss /= static_cast<double>(n);
    return make_node(Tensor::scalar(loss), {logits}, [logits, targets, n](Node& nd) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double g = nd.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i)
            logits->grad[i] += g * (sigm(logits->val[i]) - targets[i]);
    });
}

Var dice_with_logits(const Var& logits, const Tensor& targets, double eps) {
    if (logits->numel() != targets.numel())
        throw std::invalid_argument("dice: size mismatch");
    const int64_t n = logits->numel();
    double inter = 0.0, ssum = 0.0, tsum = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double s = sigm(logits->val[i]);
        inter += s * targets[i];
        ssum += s;
        tsum += targets[i];
    }
    const double denom = ssum + tsum + eps;
    const double loss = 1.0 - (2.0 * inter + eps) / denom;
    return make_node(Tensor::scalar(loss), {logits},
                     [logits, targets, n, inter, denom, eps](Node& nd) {
                         if (!logits->requires_grad) return;
                         logits->ensure_grad();
                         const double g = nd.grad[0];
                         const double num = 2.0 * inter + eps;
                         for (int64_t i = 0; i < n; ++i) {
                             const double s = sigm(logits->val[i]);
                             const double dds = -(2.0 * targets[i] * denom - num) / (denom * denom);
                             logits->grad[i] += g * dds * s * (1.0 - s);
                         }
                     });
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& labels,
                       const std::vector<double>& row_weight) {
    const int N = logits->shape()[0], K = logits->shape()[1];
    if (static_cast<int>(labels.size()) != N || static_cast<int>(row_weight.size()) != N)
        throw std::invalid_argument("cross_entropy_rows: label count");
    double loss = 0.0;
    for (int r = 0; r < N; ++r) {
        const double* z = &logits->val.v[static_cast<size_t>(r) * K];
        double mx = z[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
        double lse = 0.0;
        for (int k = 0; k < K; ++k) lse += std::exp(z[k] - mx);
        lse = mx + std::log(lse);
        loss += row_weight[r] * (lse - z[labels[r]]);
    }
    return make_node(Tensor::scalar(loss), {logits}, [logits, labels, row_weight, N, K](Node& nd) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const double g = nd.grad[0];
        for (int r = 0; r < N; ++r) {
            const double* z = &logits->val.v[static_cast<size_t>(r) * K];
            double mx = z[0];
            for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
            double zsum = 0.0;
            for (int k = 0; k < K; ++k) zsum += std::exp(z[k] - mx);
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(z[k] - mx) / zsum;
                logits->grad[static_cast<int64_t>(r) * K + k] +=
                    g * row_weight[r] * (p - (k == labels[r] ? 1.0 : 0.0));
            }
        }
    });
}

Var weighted_pixel_ce(const Var& dense, const std::vector<uint8_t>& gt, double w_bg,
                      double w_chg) {
    const int h = dense->shape()[0], w = dense->shape()[1];
    if (dense->shape()[2] != 2) throw std::invalid_argument("weighted_pixel_ce: need 2 classes");
    if (static_cast<int64_t>(gt.size()) != static_cast<int64_t>(h) * w)
        throw std::invalid_argument("weighted_pixel_ce: gt size");
    const int64_t pixels = static_cast<int64_t>(h) * w;
    double loss = 0.0;
    for (int64_t p = 0; p < pixels; ++p) {
        const double z0 = dense->val[p * 2], z1 = dense->val[p * 2 + 1];
        const double mx = std::max(z0, z1);
        const double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
        const int cls = gt[p] ? 1 : 0;
        const double wgt = cls ? w_chg : w_bg;
        loss += wgt * (lse - (cls ? z1 : z0));
    }
    loss /= static_cast<double>(pixels);
    return make_node(Tensor::scalar(loss), {dense},
                     [dense, gt, w_bg, w_chg, pixels](Node& nd) {
                         if (!dense->requires_grad) return;
                         dense->ensure_grad();
                         const double g = nd.grad[0] / static_cast<double>(pixels);
                         for (int64_t p = 0; p < pixels; ++p) {
                             const double z0 = dense->val[p * 2], z1 = dense->val[p * 2 + 1];
                             const double mx = std::max(z0, z1);
                             const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
                             const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
                             const int cls = gt[p] ? 1 : 0;
                             const double wgt = cls ? w_chg : w_bg;
                             dense->grad[p * 2] += g * wgt * (p0 - (cls == 0 ? 1.0 : 0.0));
                             dense->grad[p * 2 + 1] += g * wgt * (p1 - (cls == 1 ? 1.0 : 0.0));
                         }
                     });
}

Var aggregate_lse_op(const Var& p, const Var& m) {
    const int Q = p->shape()[0];
    if (p->shape()[1] != 2) throw std::invalid_argument("aggregate_lse: p must be {Q,2}");
    if (m->shape()[0] != Q) throw std::invalid_argument("aggregate_lse: query count mismatch");
    const int h = m->shape()[1], w = m->shape()[2];
    const int64_t pixels = static_cast<int64_t>(h) * w;
    Tensor out({h, w, 2});
    for (int64_t px = 0; px < pixels; ++px)
        for (int c = 0; c < 2; ++c) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int q = 0; q < Q; ++q)
                mx = std::max(mx, p->val.at2(q, c) + m->val[static_cast<int64_t>(q) * pixels + px]);
            double z = 0.0;
            for (int q = 0; q < Q; ++q)
                z += std::exp(p->val.at2(q, c) + m->val[static_cast<int64_t>(q) * pixels + px] -
                              mx);
            out[px * 2 + c] = mx + std::log(z);
        }
    return make_node(std::move(out), {p, m}, [p, m, Q, pixels](Node& nd) {
        const bool gp = p->requires_grad, gm = m->requires_grad;
        if (gp) p->ensure_grad();
        if (gm) m->ensure_grad();
        if (!gp && !gm) return;
        for (int64_t px = 0; px < pixels; ++px)
            for (int c = 0; c < 2; ++c) {
                const double g = nd.grad[px * 2 + c];
                if (g == 0.0) continue;
                const double ell = nd.val[px * 2 + c];
                for (int q = 0; q < Q; ++q) {
                    const double wq = std::exp(p->val.at2(q, c) +
                                               m->val[static_cast<int64_t>(q) * pixels + px] - ell);
                    if (gp) p->grad[static_cast<int64_t>(q) * 2 + c] += g * wq;
                    if (gm) m->grad[static_cast<int64_t>(q) * pixels + px] += g * wq;
                }
            }
    });
}

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    const int H = x.shape[0], W = x.shape[1], C = x.shape[2];
    Tensor out({out_h, out_w, C});
    for (int oy = 0; oy < out_h; ++oy) {
        const double yc = std::clamp(resize_coord(oy, out_h, H), 0.0, static_cast<double>(H - 1));
        const int y0 = static_cast<int>(std::floor(yc));
        const int y1 = std::min(y0 + 1, H - 1);
        const double fy = yc - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            const double xc =
                std::clamp(resize_coord(ox, out_w, W), 0.0, static_cast<double>(W - 1));
            const int x0 = static_cast<int>(std::floor(xc));
            const int x1 = std::min(x0 + 1, W - 1);
            const double fx = xc - x0;
            for (int c = 0; c < C; ++c)
                out.at3(oy, ox, c) = (1 - fy) * ((1 - fx) * x.at3(y0, x0, c) + fx * x.at3(y0, x1, c)) +
                                     fy * ((1 - fx) * x.at3(y1, x0, c) + fx * x.at3(y1, x1, c));
        }
    }
    return out;
}

}  // namespace cd::ops
