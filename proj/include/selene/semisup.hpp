#pragma once

#include <functional>

#include "selene/losses.hpp"
#include "selene/nn_ops.hpp"
#include "selene/routing.hpp"
#include "selene/tensor.hpp"

namespace selene {

// The dataset-dependent supervised pixel loss (cross-entropy or OHEM).
using SupLossFn = std::function<Tensor(const Tensor& logits, const IntTensor& target)>;

// ---------------------------------------------------------------------------
// Mean teacher
// ---------------------------------------------------------------------------

// EMA shadow of the student. The shadow's parameters carry no gradient
// buffers, so no backward pass can ever write into them.
struct TeacherState {
    RoutingNet net;
    double alpha;

    TeacherState(const RoutingNet& student, double alpha_) : net(student.clone_detached()), alpha(alpha_) {
        if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("TeacherState: alpha must lie in [0,1]");
    }
};

// theta_bar <- alpha * theta_bar + (1 - alpha) * theta, elementwise.
inline void ema_update(TeacherState& teacher, RoutingNet& student) {
    auto tp = teacher.net.parameters();
    auto sp = student.parameters();
    if (tp.size() != sp.size()) throw std::invalid_argument("ema_update: parameter lists differ in length");
    const double a = teacher.alpha;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (tp[i]->shape() != sp[i]->shape())
            throw std::invalid_argument("ema_update: shape mismatch " + shape_str(tp[i]->shape()) + " vs " +
                                        shape_str(sp[i]->shape()));
        double* t = tp[i]->data_mut();
        const double* s = sp[i]->data();
        for (std::size_t e = 0; e < tp[i]->size(); ++e) t[e] = a * t[e] + (1.0 - a) * s[e];
    }
}

// MSE between the two post-softmax probability maps, treating the teacher
// side as a constant. The caller passes teacher logits computed under
// NoGradScope; detaching again here is belt and braces.
inline Tensor consistency_mse(const Tensor& student_logits, const Tensor& teacher_logits) {
    return mse_loss(channel_softmax(student_logits), channel_softmax(teacher_logits.detach()));
}

// Eq-style consistency: MSE(p_t, p_s) averaged over the labeled batch plus
// the same over the unlabeled batch. Gradient flows only through the student.
inline Tensor mt_unsup_loss(const RoutingNet& student, const TeacherState& teacher, const Tensor& labeled,
                            const Tensor& unlabeled) {
    auto term = [&](const Tensor& images) {
        Tensor t_logits;
        {
            NoGradScope ng;
            t_logits = teacher.net.forward(images);
        }
        return consistency_mse(student.forward(images), t_logits);
    };
    const bool has_l = labeled.defined() && labeled.dim(0) > 0;
    const bool has_u = unlabeled.defined() && unlabeled.dim(0) > 0;
    if (has_l && has_u) return add(term(labeled), term(unlabeled));
    if (has_l) return term(labeled);
    if (has_u) return term(unlabeled);
    return Tensor::scalar(0.0);
}

// Supervised term of the mean-teacher step, computed on student outputs: the
// teacher is EMA-only and carries no gradient, so training against its
// outputs would leave the supervised loss without any trainable path.
inline Tensor mt_sup_loss(const RoutingNet& student, const Tensor& labeled_images, const IntTensor& labels,
                          const SupLossFn& sup_loss) {
    return sup_loss(student.forward(labeled_images), labels);
}

// The teacher's supervised loss of the paper's formulation, reported as a
// metric only.
inline double mt_teacher_sup_metric(const TeacherState& teacher, const Tensor& labeled_images,
                                    const IntTensor& labels, const SupLossFn& sup_loss) {
    NoGradScope ng;
    return sup_loss(teacher.net.forward(labeled_images), labels).item();
}

// ---------------------------------------------------------------------------
// Co-teaching (cross pseudo supervision)
// ---------------------------------------------------------------------------

// Two independently trained peers of the same architecture.
struct PeerPair {
    RoutingNet net_a;
    RoutingNet net_b;

    PeerPair(const RoutingConfig& cfg, Rng& rng_a, Rng& rng_b) : net_a(cfg, rng_a), net_b(cfg, rng_b) {}
};

// Per-pixel argmax pseudo-labels; gradient-opaque by construction, ties break
// toward the lowest class index.
inline IntTensor ct_pseudo_labels(const Tensor& probs) { return argmax_channel(probs); }

// CE(a, pseudo(b)) + CE(b, pseudo(a)) on shared inputs. Pseudo-labels come
// from the argmax, which is invariant under softmax, so logits serve directly.
inline Tensor ct_cps_term(const Tensor& logits_a, const Tensor& logits_b) {
    const IntTensor pl_a = argmax_channel(logits_a);
    const IntTensor pl_b = argmax_channel(logits_b);
    return add(softmax_cross_entropy(logits_a, pl_b, kIgnoreIndex), softmax_cross_entropy(logits_b, pl_a, kIgnoreIndex));
}

// Cross-pseudo supervision over the unlabeled batch plus the same
// construction over the labeled batch with its ground truth ignored.
inline Tensor ct_unsup_loss(const PeerPair& pair, const Tensor& labeled, const Tensor& unlabeled) {
    auto term = [&](const Tensor& images) { return ct_cps_term(pair.net_a.forward(images), pair.net_b.forward(images)); };
    const bool has_l = labeled.defined() && labeled.dim(0) > 0;
    const bool has_u = unlabeled.defined() && unlabeled.dim(0) > 0;
    if (has_l && has_u) return add(term(unlabeled), term(labeled));
    if (has_u) return term(unlabeled);
    if (has_l) return term(labeled);
    return Tensor::scalar(0.0);
}

// l_d(p_a, y) + l_d(p_b, y), both peers against the ground truth.
inline Tensor ct_sup_loss(const PeerPair& pair, const Tensor& labeled_images, const IntTensor& labels,
                          const SupLossFn& sup_loss) {
    return add(sup_loss(pair.net_a.forward(labeled_images), labels),
               sup_loss(pair.net_b.forward(labeled_images), labels));
}

}  // namespace selene
