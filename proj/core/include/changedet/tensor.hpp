#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cd {

using Shape = std::vector<int>;

/// Dense row-major tensor of doubles. All model math runs in float64;
/// parameters are kept on the float32 grid (see Tensor::snap_f32) so the
/// float32 checkpoint format round-trips bitwise.
struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(count(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != count(shape))
            throw std::invalid_argument("tensor data size does not match shape");
    }

    static int64_t count(const Shape& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }
    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double x) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    // H x W x C accessors.
    double& at3(int y, int x, int c) {
        return v[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c];
    }
    double at3(int y, int x, int c) const {
        return v[(static_cast<size_t>(y) * shape[1] + x) * shape[2] + c];
    }
    double& at2(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
    double at2(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }

    bool all_finite() const;
    double abs_max() const;

    /// Rounds every entry to the nearest float32 value.
    void snap_f32() {
        for (double& x : v) x = static_cast<double>(static_cast<float>(x));
    }
};

bool same_shape(const Shape& a, const Shape& b);
std::string shape_str(const Shape& s);

/// Deterministic RNG. mt19937_64 is fully specified by the standard and the
/// derived draws below avoid std::*_distribution (whose output is
/// implementation-defined), so streams are reproducible across platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed) : g_(seed) {}

    uint64_t next() { return g_(); }
    double u01() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
    double uniform(double a, double b) { return a + (b - a) * u01(); }
    double normal() {
        double u1 = 1.0 - u01();  // (0,1]
        double u2 = u01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }
    /// Normal(0, sigma) rejected outside +-clip*sigma.
    double trunc_normal(double sigma, double clip = 2.0) {
        double x;
        do {
            x = normal();
        } while (std::abs(x) > clip);
        return x * sigma;
    }
    int uniform_int(int n) {
        // Lemire multiply-shift; deterministic, negligible bias at these ranges.
        return static_cast<int>((static_cast<unsigned __int128>(g_()) *
                                 static_cast<unsigned __int128>(n)) >>
                                64);
    }
    bool coin() { return (g_() & 1) != 0; }

  private:
    std::mt19937_64 g_;
};

/// Mixes a seed with a stream tag; used to derive independent substreams.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

// ---------------------------------------------------------------------------
// Reverse-mode autodiff: a dynamically built DAG of Nodes. Ops live in
// ops.hpp. backward() seeds d(root)=1 and runs the tape in reverse
// topological order, single-threaded, so gradients are bitwise deterministic.
// ---------------------------------------------------------------------------

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    const Shape& shape() const { return val.shape; }
    int64_t numel() const { return val.numel(); }

    void ensure_grad() {
        if (!has_grad) {
            grad = Tensor::zeros(val.shape);
            has_grad = true;
        }
    }
};

Var constant(Tensor t);
Var leaf(Tensor t, bool requires_grad, std::string name = "");

/// Backpropagates from a scalar root through the tape.
void backward(const Var& root);

namespace detail {
/// Adds `delta` into p's gradient if p participates in differentiation.
inline void add_grad(const Var& p, int64_t idx, double delta) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad[idx] += delta;
}
Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backprop);
}  // namespace detail

}  // namespace cd
