#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace selene {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) {
        if (e < 0) throw std::invalid_argument("negative extent in shape");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

// Mask/target value excluded from losses and metrics.
constexpr int kIgnoreIndex = 255;

// Integer-valued array for class maps and targets; not differentiable.
struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> v;

    IntTensor() = default;
    explicit IntTensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), 0) {}
    IntTensor(Shape s, std::vector<std::int32_t> values) : shape(std::move(s)), v(std::move(values)) {
        if (shape_numel(shape) != v.size()) throw std::invalid_argument("IntTensor: shape/value count mismatch");
    }

    std::size_t size() const { return v.size(); }
    std::int32_t operator[](std::size_t i) const { return v[i]; }
    std::int32_t& operator[](std::size_t i) { return v[i]; }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
};

class Tape;

namespace detail {

struct TapeNode {
    std::vector<double> grad;  // d(loss)/d(output), sized on first arrival
    std::size_t out_size = 0;
    bool seeded = false;
    std::function<void(const std::vector<double>&)> pull;
    Tape* tape = nullptr;
    std::size_t index = 0;
};

inline thread_local Tape* g_active_tape = nullptr;
inline thread_local int g_no_grad_depth = 0;

}  // namespace detail

// Records one step's differentiable operations in execution order, which is
// topological by construction. Single-writer: one training step owns one tape.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return detail::g_active_tape; }

    std::shared_ptr<detail::TapeNode> record(std::size_t out_size,
                                             std::function<void(const std::vector<double>&)> pull) {
        auto node = std::make_shared<detail::TapeNode>();
        node->out_size = out_size;
        node->pull = std::move(pull);
        node->tape = this;
        node->index = nodes_.size();
        nodes_.push_back(node);
        return node;
    }

    // Reverse sweep from `from`. Node gradients are transient per call; leaf
    // gradients accumulate across calls (the caller zeroes them).
    void run_backward(detail::TapeNode& from) {
        for (std::size_t i = 0; i <= from.index; ++i) {
            nodes_[i]->grad.clear();
            nodes_[i]->seeded = false;
        }
        from.grad.assign(from.out_size, 0.0);
        from.grad[0] = 1.0;
        from.seeded = true;
        for (std::size_t i = from.index + 1; i-- > 0;) {
            detail::TapeNode& n = *nodes_[i];
            if (n.seeded) n.pull(n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<std::shared_ptr<detail::TapeNode>> nodes_;
};

// Activates a tape for the current thread. Nested scopes are rejected: one
// step, one tape.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) {
        if (detail::g_active_tape) throw std::logic_error("TapeScope: a tape is already active on this thread");
        detail::g_active_tape = &tape;
    }
    ~TapeScope() { detail::g_active_tape = nullptr; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
};

// Suspends recording; forwards computed inside are constants to the tape.
class NoGradScope {
public:
    NoGradScope() { ++detail::g_no_grad_depth; }
    ~NoGradScope() { --detail::g_no_grad_depth; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;
};

// Dense N-dimensional array of doubles, row-major. Values are immutable once
// an operation has produced them; data_mut() exists for construction,
// parameter updates between steps, and the data pipeline.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : *t.data_) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) + " does not match value count " +
                                        std::to_string(values.size()));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<double>>(std::move(values));
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    const double* data() const { return data_->data(); }
    double operator[](std::size_t i) const { return (*data_)[i]; }

    double item() const {
        if (size() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(size()) + " elements");
        return (*data_)[0];
    }

    double* data_mut() { return data_->data(); }

    // Leaf gradient buffer. Allocating it marks the tensor as a trainable
    // parameter; backward() accumulates here until zero_grad().
    void set_requires_grad(bool on) {
        if (node_) throw std::logic_error("set_requires_grad: tensor is an op result, not a leaf");
        if (on && !grad_) grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
        if (!on) grad_.reset();
    }
    bool requires_grad() const { return static_cast<bool>(grad_); }
    std::vector<double>& grad() {
        if (!grad_) throw std::logic_error("Tensor::grad: no gradient buffer (set_requires_grad first)");
        return *grad_;
    }
    const std::vector<double>& grad() const {
        if (!grad_) throw std::logic_error("Tensor::grad: no gradient buffer (set_requires_grad first)");
        return *grad_;
    }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
    }

    bool has_node() const { return static_cast<bool>(node_); }

    // A view of the same values with no autodiff linkage.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    // Deep copy of the values (fresh storage, no linkage).
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<double>>(*data_);
        return t;
    }

    // --- internal: autodiff plumbing (used by op implementations) ---
    std::shared_ptr<detail::TapeNode> node_;
    std::shared_ptr<std::vector<double>> grad_leaf() const { return grad_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<std::vector<double>> grad_;
};

namespace detail {

inline bool recording() { return g_active_tape != nullptr && g_no_grad_depth == 0; }

// Destination for a gradient contribution: either an upstream tape node or a
// leaf parameter's buffer. Nodes from a different (previous) tape are treated
// as constants.
struct Sink {
    std::shared_ptr<TapeNode> node;
    std::shared_ptr<std::vector<double>> leaf;

    explicit operator bool() const { return node != nullptr || leaf != nullptr; }

    void add(const double* g, std::size_t n) const {
        std::vector<double>* dst;
        if (node) {
            if (!node->seeded) {
                node->grad.assign(node->out_size, 0.0);
                node->seeded = true;
            }
            dst = &node->grad;
        } else {
            dst = leaf.get();
        }
        double* d = dst->data();
        for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    }

    // Accumulate into a single element (for gather-style backwards).
    void add_at(std::size_t i, double g) const {
        std::vector<double>* dst;
        if (node) {
            if (!node->seeded) {
                node->grad.assign(node->out_size, 0.0);
                node->seeded = true;
            }
            dst = &node->grad;
        } else {
            dst = leaf.get();
        }
        (*dst)[i] += g;
    }

    // Raw accumulation buffer for hot backward loops.
    double* prepare() const {
        if (node) {
            if (!node->seeded) {
                node->grad.assign(node->out_size, 0.0);
                node->seeded = true;
            }
            return node->grad.data();
        }
        return leaf->data();
    }
};

inline Sink sink_of(const Tensor& t) {
    Sink s;
    if (t.node_ && t.node_->tape == Tape::active()) {
        s.node = t.node_;
    } else if (!t.node_ && t.requires_grad()) {
        s.leaf = t.grad_leaf();
    }
    return s;
}

inline void attach(Tensor& out, std::function<void(const std::vector<double>&)> pull) {
    out.node_ = Tape::active()->record(out.size(), std::move(pull));
}

}  // namespace detail

// Runs the reverse sweep from a scalar loss, populating the grad buffer of
// every reachable parameter. Gradients accumulate; callers zero them.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node_) throw std::invalid_argument("backward: loss is not attached to a tape");
    loss.node_->tape->run_backward(*loss.node_);
}

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const std::size_t n = a.size();
    Tensor out(a.shape());
    double* o = out.data_mut();
    const double *pa = a.data(), *pb = b.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] + pb[i];
    if (detail::recording()) {
        auto sa = detail::sink_of(a), sb = detail::sink_of(b);
        if (sa || sb)
            detail::attach(out, [sa, sb, n](const std::vector<double>& g) {
                if (sa) sa.add(g.data(), n);
                if (sb) sb.add(g.data(), n);
            });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const std::size_t n = a.size();
    Tensor out(a.shape());
    double* o = out.data_mut();
    const double *pa = a.data(), *pb = b.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] - pb[i];
    if (detail::recording()) {
        auto sa = detail::sink_of(a), sb = detail::sink_of(b);
        if (sa || sb)
            detail::attach(out, [sa, sb, n](const std::vector<double>& g) {
                if (sa) sa.add(g.data(), n);
                if (sb)
                    for (std::size_t i = 0; i < n; ++i) sb.add_at(i, -g[i]);
            });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const std::size_t n = a.size();
    Tensor out(a.shape());
    double* o = out.data_mut();
    const double *pa = a.data(), *pb = b.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] * pb[i];
    if (detail::recording()) {
        auto sa = detail::sink_of(a), sb = detail::sink_of(b);
        if (sa || sb) {
            Tensor av = a.detach(), bv = b.detach();
            detail::attach(out, [sa, sb, av, bv, n](const std::vector<double>& g) {
                if (sa)
                    for (std::size_t i = 0; i < n; ++i) sa.add_at(i, g[i] * bv[i]);
                if (sb)
                    for (std::size_t i = 0; i < n; ++i) sb.add_at(i, g[i] * av[i]);
            });
        }
    }
    return out;
}

// out = a*x + b elementwise with constant coefficients.
inline Tensor affine(const Tensor& x, double a, double b) {
    const std::size_t n = x.size();
    Tensor out(x.shape());
    double* o = out.data_mut();
    const double* px = x.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = a * px[i] + b;
    if (detail::recording()) {
        auto sx = detail::sink_of(x);
        if (sx)
            detail::attach(out, [sx, a, n](const std::vector<double>& g) {
                for (std::size_t i = 0; i < n; ++i) sx.add_at(i, g[i] * a);
            });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    const std::size_t n = a.size();
    Tensor out(a.shape());
    double* o = out.data_mut();
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] * c;
    if (detail::recording()) {
        auto sa = detail::sink_of(a);
        if (sa)
            detail::attach(out, [sa, c, n](const std::vector<double>& g) {
                for (std::size_t i = 0; i < n; ++i) sa.add_at(i, g[i] * c);
            });
    }
    return out;
}

// out = w[entry] * x, with gradient flowing to both x and the selected gate
// weight. The workhorse of soft routing.
inline Tensor scale_by_entry(const Tensor& x, const Tensor& w, int entry) {
    if (entry < 0 || static_cast<std::size_t>(entry) >= w.size())
        throw std::invalid_argument("scale_by_entry: entry out of range");
    const std::size_t n = x.size();
    const double c = w[static_cast<std::size_t>(entry)];
    Tensor out(x.shape());
    double* o = out.data_mut();
    const double* px = x.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = px[i] * c;
    if (detail::recording()) {
        auto sx = detail::sink_of(x), sw = detail::sink_of(w);
        if (sx || sw) {
            Tensor xv = x.detach();
            const std::size_t e = static_cast<std::size_t>(entry);
            detail::attach(out, [sx, sw, xv, c, e, n](const std::vector<double>& g) {
                if (sx)
                    for (std::size_t i = 0; i < n; ++i) sx.add_at(i, g[i] * c);
                if (sw) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) dot += g[i] * xv[i];
                    sw.add_at(e, dot);
                }
            });
        }
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    const std::size_t n = a.size();
    Tensor out(a.shape());
    double* o = out.data_mut();
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) o[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    if (detail::recording()) {
        auto sa = detail::sink_of(a);
        if (sa) {
            Tensor av = a.detach();
            detail::attach(out, [sa, av, n](const std::vector<double>& g) {
                for (std::size_t i = 0; i < n; ++i)
                    if (av[i] > 0.0) sa.add_at(i, g[i]);
            });
        }
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    const std::size_t n = a.size();
    double s = 0.0;
    const double* pa = a.data();
    for (std::size_t i = 0; i < n; ++i) s += pa[i];
    Tensor out = Tensor::scalar(s);
    if (detail::recording()) {
        auto sa = detail::sink_of(a);
        if (sa)
            detail::attach(out, [sa, n](const std::vector<double>& g) {
                for (std::size_t i = 0; i < n; ++i) sa.add_at(i, g[0]);
            });
    }
    return out;
}

// Softmax over a rank-1 tensor; used to normalize gate logits.
inline Tensor softmax1d(const Tensor& logits) {
    if (logits.rank() != 1) throw std::invalid_argument("softmax1d: expected rank-1 tensor, got " + shape_str(logits.shape()));
    const std::size_t n = logits.size();
    Tensor out(logits.shape());
    const double* z = logits.data();
    double* p = out.data_mut();
    double zmax = z[0];
    for (std::size_t i = 1; i < n; ++i) zmax = std::max(zmax, z[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::exp(z[i] - zmax);
        denom += p[i];
    }
    for (std::size_t i = 0; i < n; ++i) p[i] /= denom;
    if (detail::recording()) {
        auto sa = detail::sink_of(logits);
        if (sa) {
            Tensor pv = out.detach();
            detail::attach(out, [sa, pv, n](const std::vector<double>& g) {
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += g[i] * pv[i];
                for (std::size_t i = 0; i < n; ++i) sa.add_at(i, pv[i] * (g[i] - dot));
            });
        }
    }
    return out;
}

}  // namespace selene
