#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "selene/data.hpp"
#include "selene/routing.hpp"
#include "selene/tensor.hpp"

namespace selene {

// K x K pixel counts, counts[truth][pred]; ignore pixels excluded.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes)
        : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
        if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
    }

    int num_classes() const { return k_; }

    std::int64_t at(int truth, int pred) const {
        return counts_[static_cast<std::size_t>(truth) * k_ + pred];
    }
    std::int64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * k_ + pred]; }

    void update(const IntTensor& pred, const IntTensor& truth) {
        if (pred.shape != truth.shape)
            throw std::invalid_argument("ConfusionMatrix::update: prediction/truth shape mismatch");
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const std::int32_t t = truth[i];
            if (t == kIgnoreIndex) continue;
            const std::int32_t p = pred[i];
            if (t < 0 || t >= k_)
                throw std::invalid_argument("ConfusionMatrix::update: truth class " + std::to_string(t) +
                                            " outside [0," + std::to_string(k_) + ")");
            if (p < 0 || p >= k_)
                throw std::invalid_argument("ConfusionMatrix::update: predicted class " + std::to_string(p) +
                                            " outside [0," + std::to_string(k_) + ")");
            ++at(t, p);
        }
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
        if (other.k_ != k_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
        return *this;
    }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (std::int64_t c : counts_) t += c;
        return t;
    }

private:
    int k_;
    std::vector<std::int64_t> counts_;
};

// Mean IoU over the classes with nonzero union; classes absent from both
// prediction and truth do not enter the mean.
inline double miou(const ConfusionMatrix& cm) {
    const int k = cm.num_classes();
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < k; ++c) {
        std::int64_t row = 0, col = 0;
        for (int j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::int64_t uni = row + col - cm.at(c, c);
        if (uni > 0) {
            sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(uni);
            ++counted;
        }
    }
    return counted > 0 ? sum / counted : 0.0;
}

inline double pixel_accuracy(const ConfusionMatrix& cm) {
    const std::int64_t total = cm.total();
    if (total == 0) return 0.0;
    std::int64_t diag = 0;
    for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
    return static_cast<double>(diag) / static_cast<double>(total);
}

struct EvalResult {
    double miou = 0.0;
    double pixel_acc = 0.0;
};

// Single-scale evaluation with no augmentation: per-image argmax of the
// segmentation logits accumulated into one confusion matrix.
inline EvalResult evaluate(const RoutingNet& net, const std::vector<Sample>& dataset) {
    if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
    ConfusionMatrix cm(net.cfg.num_classes);
    NoGradScope ng;
    for (const Sample& s : dataset) {
        Tensor batch = Tensor(Shape{1, 3, s.image.dim(1), s.image.dim(2)});
        std::memcpy(batch.data_mut(), s.image.data(), s.image.size() * sizeof(double));
        const Tensor logits = net.forward(batch);
        IntTensor pred = argmax_channel(logits);
        pred.shape = Shape{s.image.dim(1), s.image.dim(2)};
        cm.update(pred, s.mask);
    }
    return {miou(cm), pixel_accuracy(cm)};
}

}  // namespace selene
