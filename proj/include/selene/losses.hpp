#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "selene/tensor.hpp"

namespace selene {

namespace detail {

struct CePosition {
    std::size_t logit_base;  // offset of class 0 for this position
    std::size_t cls_stride;  // stride between consecutive classes
    std::int32_t target;
};

// Flattens [B,K] or [B,K,H,W] logits + targets into per-position records,
// skipping ignore_index. Validates target range.
inline std::vector<CePosition> ce_positions(const Tensor& logits, const IntTensor& target, int ignore_index) {
    if (logits.rank() != 2 && logits.rank() != 4)
        throw std::invalid_argument("cross_entropy: logits must be rank 2 or 4, got " + shape_str(logits.shape()));
    const int batch = logits.dim(0), k = logits.dim(1);
    const std::size_t hw = logits.rank() == 4 ? static_cast<std::size_t>(logits.dim(2)) * logits.dim(3) : 1;
    if (target.size() != static_cast<std::size_t>(batch) * hw)
        throw std::invalid_argument("cross_entropy: target count " + std::to_string(target.size()) +
                                    " does not match logits " + shape_str(logits.shape()));
    std::vector<CePosition> pos;
    pos.reserve(target.size());
    for (int b = 0; b < batch; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * k * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            const std::int32_t t = target[static_cast<std::size_t>(b) * hw + i];
            if (t == ignore_index) continue;
            if (t < 0 || t >= k)
                throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " outside [0," +
                                            std::to_string(k) + ")");
            pos.push_back({base + i, hw, t});
        }
    }
    return pos;
}

// Stable per-position softmax probabilities and -log p[target].
inline double ce_position_loss(const double* z, const CePosition& p, int k, double* probs) {
    double zmax = z[p.logit_base];
    for (int j = 1; j < k; ++j) zmax = std::max(zmax, z[p.logit_base + j * p.cls_stride]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
        probs[j] = std::exp(z[p.logit_base + j * p.cls_stride] - zmax);
        denom += probs[j];
    }
    for (int j = 0; j < k; ++j) probs[j] /= denom;
    const double lse = zmax + std::log(denom);
    return lse - z[p.logit_base + p.target * p.cls_stride];
}

}  // namespace detail

// Mean over non-ignored positions of -log softmax(logits)[target].
// With every position ignored the loss is defined as 0 and *all_ignored is
// set when provided.
inline Tensor softmax_cross_entropy(const Tensor& logits, const IntTensor& target, int ignore_index = -1,
                                    bool* all_ignored = nullptr) {
    const int k = logits.dim(1);
    auto positions = detail::ce_positions(logits, target, ignore_index);
    if (all_ignored) *all_ignored = positions.empty();
    if (positions.empty()) return Tensor::scalar(0.0);

    const double* z = logits.data();
    std::vector<double> probs(positions.size() * k);
    double total = 0.0;
    for (std::size_t i = 0; i < positions.size(); ++i)
        total += detail::ce_position_loss(z, positions[i], k, probs.data() + i * k);
    Tensor out = Tensor::scalar(total / positions.size());

    if (detail::recording()) {
        auto si = detail::sink_of(logits);
        if (si) {
            detail::attach(out, [si, positions = std::move(positions), probs = std::move(probs),
                                 k](const std::vector<double>& g) {
                double* gin = si.prepare();
                const double scale = g[0] / positions.size();
                for (std::size_t i = 0; i < positions.size(); ++i) {
                    const detail::CePosition& p = positions[i];
                    const double* pr = probs.data() + i * k;
                    for (int j = 0; j < k; ++j) {
                        const double delta = pr[j] - (j == p.target ? 1.0 : 0.0);
                        gin[p.logit_base + j * p.cls_stride] += scale * delta;
                    }
                }
            });
        }
    }
    return out;
}

// Squared difference summed over every non-batch dimension, averaged over the
// batch (dimension 0).
inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse_loss");
    if (a.rank() < 1) throw std::invalid_argument("mse_loss: need at least a batch dimension");
    const int batch = a.dim(0);
    const std::size_t n = a.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pa[i] - pb[i];
        total += d * d;
    }
    Tensor out = Tensor::scalar(total / batch);
    if (detail::recording()) {
        auto sa = detail::sink_of(a), sb = detail::sink_of(b);
        if (sa || sb) {
            Tensor av = a.detach(), bv = b.detach();
            detail::attach(out, [sa, sb, av, bv, batch, n](const std::vector<double>& g) {
                const double c = 2.0 * g[0] / batch;
                if (sa) {
                    double* ga = sa.prepare();
                    for (std::size_t i = 0; i < n; ++i) ga[i] += c * (av[i] - bv[i]);
                }
                if (sb) {
                    double* gb = sb.prepare();
                    for (std::size_t i = 0; i < n; ++i) gb[i] -= c * (av[i] - bv[i]);
                }
            });
        }
    }
    return out;
}

// Online hard example mining: cross-entropy averaged over the positions whose
// true-class probability falls below keep_threshold, widened to at least
// min_kept hardest positions (all valid positions when fewer exist).
inline Tensor ohem_cross_entropy(const Tensor& logits, const IntTensor& target, int ignore_index,
                                 double keep_threshold, int min_kept, bool* all_ignored = nullptr) {
    if (min_kept < 1) throw std::invalid_argument("ohem_cross_entropy: min_kept must be >= 1");
    const int k = logits.dim(1);
    auto positions = detail::ce_positions(logits, target, ignore_index);
    if (all_ignored) *all_ignored = positions.empty();
    if (positions.empty()) return Tensor::scalar(0.0);

    const double* z = logits.data();
    const std::size_t nvalid = positions.size();
    std::vector<double> losses(nvalid);
    std::vector<double> ptrue(nvalid);
    std::vector<double> probs(nvalid * k);
    for (std::size_t i = 0; i < nvalid; ++i) {
        losses[i] = detail::ce_position_loss(z, positions[i], k, probs.data() + i * k);
        ptrue[i] = probs[i * k + positions[i].target];
    }

    std::vector<std::size_t> order(nvalid);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ptrue[a] < ptrue[b]; });

    std::size_t below = 0;
    while (below < nvalid && ptrue[order[below]] < keep_threshold) ++below;
    const std::size_t kept = std::max(below, std::min<std::size_t>(static_cast<std::size_t>(min_kept), nvalid));

    double total = 0.0;
    for (std::size_t i = 0; i < kept; ++i) total += losses[order[i]];
    Tensor out = Tensor::scalar(total / kept);

    if (detail::recording()) {
        auto si = detail::sink_of(logits);
        if (si) {
            order.resize(kept);
            detail::attach(out, [si, positions = std::move(positions), probs = std::move(probs),
                                 order = std::move(order), k](const std::vector<double>& g) {
                double* gin = si.prepare();
                const double scale = g[0] / order.size();
                for (std::size_t oi : order) {
                    const detail::CePosition& p = positions[oi];
                    const double* pr = probs.data() + oi * k;
                    for (int j = 0; j < k; ++j) {
                        const double delta = pr[j] - (j == p.target ? 1.0 : 0.0);
                        gin[p.logit_base + j * p.cls_stride] += scale * delta;
                    }
                }
            });
        }
    }
    return out;
}

}  // namespace selene
