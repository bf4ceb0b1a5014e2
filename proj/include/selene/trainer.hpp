#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "selene/checkpoint.hpp"
#include "selene/data.hpp"
#include "selene/jigsaw.hpp"
#include "selene/metrics.hpp"
#include "selene/routing.hpp"
#include "selene/semisup.hpp"
#include "selene/tensor.hpp"

namespace selene {

enum class Method { None, SslOnly, MeanTeacher, CoTeaching, Full };

inline Method parse_method(const std::string& s) {
    if (s == "none") return Method::None;
    if (s == "ssl_only") return Method::SslOnly;
    if (s == "mean_teacher") return Method::MeanTeacher;
    if (s == "co_teaching") return Method::CoTeaching;
    if (s == "full") return Method::Full;
    throw std::invalid_argument("unknown method '" + s + "' (expected none|ssl_only|mean_teacher|co_teaching|full)");
}

inline std::string method_name(Method m) {
    switch (m) {
        case Method::None: return "none";
        case Method::SslOnly: return "ssl_only";
        case Method::MeanTeacher: return "mean_teacher";
        case Method::CoTeaching: return "co_teaching";
        case Method::Full: return "full";
    }
    return "?";
}

enum class SupLossKind { CrossEntropy, Ohem };

struct TrainConfig {
    double lambda0 = 1.0;
    double lambda1 = 0.1;
    double lambda2 = 1.0;
    Method method = Method::None;
    double alpha = 0.99;       // teacher EMA coefficient
    double lr0 = 0.02;
    double momentum = 0.9;
    double poly_power = 0.9;
    int epochs = 4;
    int batch_labeled = 4;
    int batch_unlabeled = 4;
    std::uint64_t seed = 0;

    // harness knobs
    int crop_size = 96;
    int log_every = 1;
    bool augment = true;
    SupLossKind sup_loss = SupLossKind::CrossEntropy;
    double ohem_threshold = 0.7;
    bool independent_teacher_aug = false;  // give the teacher its own augmentation draw
    bool jigsaw_segmentation = false;      // also train segmentation on jigsawed labeled images

    void validate() const {
        if (lambda0 < 0 || lambda1 < 0 || lambda2 < 0)
            throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
        if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("TrainConfig: alpha must lie in [0,1]");
        if (lr0 <= 0.0) throw std::invalid_argument("TrainConfig: lr0 must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("TrainConfig: momentum must lie in [0,1)");
        if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
        if (batch_labeled < 1 || batch_unlabeled < 1)
            throw std::invalid_argument("TrainConfig: batch sizes must be >= 1");
        if (crop_size < 32 || crop_size % 32 != 0)
            throw std::invalid_argument("TrainConfig: crop_size must be a positive multiple of 32");
        if (log_every < 1) throw std::invalid_argument("TrainConfig: log_every must be >= 1");
    }
};

// lr0 * (1 - t/T)^power
inline double poly_lr(std::int64_t t, std::int64_t total, double lr0, double power) {
    if (total <= 0) throw std::invalid_argument("poly_lr: total step count must be positive");
    if (t < 0 || t > total) throw std::invalid_argument("poly_lr: step outside [0,T]");
    return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), power);
}

// Heavy-ball SGD: v <- mu*v + g; p <- p - lr*v.
struct OptimizerState {
    std::vector<std::vector<double>> velocity;

    void init(const std::vector<Tensor*>& params) {
        velocity.clear();
        for (Tensor* p : params) velocity.emplace_back(p->size(), 0.0);
    }
};

inline void sgd_momentum_step(const std::vector<Tensor*>& params, OptimizerState& state, double lr,
                              double momentum) {
    if (state.velocity.size() != params.size())
        throw std::invalid_argument("sgd_momentum_step: optimizer state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const std::vector<double>& g = p.grad();
        std::vector<double>& v = state.velocity[i];
        double* pv = p.data_mut();
        for (std::size_t e = 0; e < v.size(); ++e) {
            v[e] = momentum * v[e] + g[e];
            pv[e] -= lr * v[e];
        }
    }
}

// lambda0*sup + lambda1*ssl + lambda2*ssup; undefined tensors and zero
// weights contribute nothing (and were never evaluated by the caller).
inline Tensor total_loss(const Tensor& sup, const Tensor& ssl, const Tensor& ssup, const TrainConfig& cfg) {
    Tensor total;
    auto accumulate = [&total](const Tensor& term, double weight) {
        if (!term.defined() || weight == 0.0) return;
        Tensor scaled = scale(term, weight);
        total = total.defined() ? add(total, scaled) : scaled;
    };
    accumulate(sup, cfg.lambda0);
    accumulate(ssl, cfg.lambda1);
    accumulate(ssup, cfg.lambda2);
    return total.defined() ? total : Tensor::scalar(0.0);
}

inline SupLossFn make_sup_loss(const TrainConfig& cfg) {
    if (cfg.sup_loss == SupLossKind::CrossEntropy)
        return [](const Tensor& logits, const IntTensor& y) { return softmax_cross_entropy(logits, y, kIgnoreIndex); };
    return [threshold = cfg.ohem_threshold](const Tensor& logits, const IntTensor& y) {
        std::size_t valid = 0;
        for (std::size_t i = 0; i < y.size(); ++i) valid += y[i] != kIgnoreIndex;
        const int min_kept = std::max<int>(1, static_cast<int>(valid / 16));
        return ohem_cross_entropy(logits, y, kIgnoreIndex, threshold, min_kept);
    };
}

struct IterRecord {
    std::int64_t iter = 0;
    int epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_sup = 0.0;
    double loss_ssl = 0.0;
    double loss_ssup = 0.0;
    bool has_miou = false;
    double miou_val = 0.0;
};

// Everything one training run owns: networks, strategy state, optimizer
// buffers and the step counter. RNG streams derive per epoch from the seed,
// so a run resumed at an epoch boundary replays the uninterrupted schedule.
struct TrainState {
    TrainConfig cfg;
    RoutingConfig net_cfg;
    RoutingNet student;  // net_a under co-teaching
    std::optional<RoutingNet> net_b;
    std::optional<TeacherState> teacher;
    std::optional<PermutationSet> pset;
    OptimizerState opt_a, opt_b;
    std::int64_t step = 0;
    int epoch = 0;
    std::int64_t steps_per_epoch = 0;  // N, fixed once fit() sees the data
    std::int64_t total_steps = 0;      // T = E*N, the poly schedule horizon

    TrainState(const TrainConfig& train_cfg, const RoutingConfig& routing_cfg)
        : cfg(train_cfg), net_cfg(routing_cfg), student(make_net(routing_cfg, train_cfg.seed, 10)) {
        cfg.validate();
        if (cfg.method == Method::CoTeaching) {
            net_b.emplace(make_net(net_cfg, cfg.seed, 11));
            opt_b.init(net_b->parameters());
        }
        if (cfg.method == Method::MeanTeacher || cfg.method == Method::Full)
            teacher.emplace(student, cfg.alpha);
        if (cfg.method == Method::SslOnly || cfg.method == Method::Full)
            pset = generate_permutation_set(net_cfg.num_permutations, Rng(cfg.seed).fork(20).next_u64());
        opt_a.init(student.parameters());
    }

    bool uses_ssl() const {
        return (cfg.method == Method::SslOnly || cfg.method == Method::Full) && cfg.lambda1 > 0.0;
    }
    bool uses_consistency() const {
        return (cfg.method == Method::MeanTeacher || cfg.method == Method::Full) && cfg.lambda2 > 0.0;
    }
    bool uses_cps() const { return cfg.method == Method::CoTeaching && cfg.lambda2 > 0.0; }

    bool warned_empty_unlabeled = false;

private:
    static RoutingNet make_net(const RoutingConfig& c, std::uint64_t seed, std::uint64_t salt) {
        Rng rng = Rng(seed).fork(salt);
        return RoutingNet(c, rng);
    }
};

namespace detail {

// Draws samples in shuffled order, reshuffling on wrap-around.
struct BatchSampler {
    const std::vector<Sample>* data;
    std::vector<std::size_t> order;
    std::size_t cursor;
    Rng rng;

    BatchSampler(const std::vector<Sample>& d, Rng r) : data(&d), order(d.size()), cursor(d.size()), rng(r) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    }

    const Sample& next() {
        if (cursor >= order.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        return (*data)[order[cursor++]];
    }
};

struct Batch {
    Tensor images;    // [B,3,crop,crop]
    IntTensor masks;  // [B,crop,crop]
};

inline std::vector<const Sample*> draw_refs(BatchSampler& sampler, int batch_size) {
    std::vector<const Sample*> refs;
    refs.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) refs.push_back(&sampler.next());
    return refs;
}

// Deterministic center placement used when augmentation is disabled.
inline Sample center_view(const Sample& s, int crop) {
    if (s.image.dim(1) == crop && s.image.dim(2) == crop) return s;
    Sample out;
    out.id = s.id;
    out.image = Tensor(Shape{3, crop, crop});
    out.mask = IntTensor(Shape{crop, crop});
    std::fill(out.mask.v.begin(), out.mask.v.end(), kIgnoreIndex);
    const int h = s.image.dim(1), w = s.image.dim(2);
    const int sy = std::max(0, (h - crop) / 2), sx = std::max(0, (w - crop) / 2);
    const int dy = std::max(0, (crop - h) / 2), dx = std::max(0, (crop - w) / 2);
    const int ly = std::min(h, crop), lx = std::min(w, crop);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < ly; ++y)
            for (int x = 0; x < lx; ++x)
                out.image.data_mut()[(static_cast<std::size_t>(c) * crop + dy + y) * crop + dx + x] =
                    s.image[(static_cast<std::size_t>(c) * h + sy + y) * w + sx + x];
    for (int y = 0; y < ly; ++y)
        for (int x = 0; x < lx; ++x)
            out.mask[static_cast<std::size_t>(dy + y) * crop + dx + x] =
                s.mask[static_cast<std::size_t>(sy + y) * w + sx + x];
    return out;
}

inline Batch make_views(const std::vector<const Sample*>& refs, Rng& aug_rng, int crop, bool augmented) {
    const int batch_size = static_cast<int>(refs.size());
    Batch b;
    b.images = Tensor(Shape{batch_size, 3, crop, crop});
    b.masks = IntTensor(Shape{batch_size, crop, crop});
    const std::size_t img_stride = static_cast<std::size_t>(3) * crop * crop;
    const std::size_t msk_stride = static_cast<std::size_t>(crop) * crop;
    for (int i = 0; i < batch_size; ++i) {
        const Sample aug = augmented ? augment(*refs[static_cast<std::size_t>(i)], aug_rng, crop)
                                     : center_view(*refs[static_cast<std::size_t>(i)], crop);
        std::memcpy(b.images.data_mut() + i * img_stride, aug.image.data(), img_stride * sizeof(double));
        std::copy(aug.mask.v.begin(), aug.mask.v.end(), b.masks.v.begin() + static_cast<std::ptrdiff_t>(i * msk_stride));
    }
    return b;
}

}  // namespace detail

// One epoch of Algorithm 1: N = max(|D_u|, |D_l|) iterations, each drawing a
// labeled and (when needed) an unlabeled batch, assembling the strategy's
// losses, running backward + SGD, then the EMA update. Terms with a zero
// weight are never evaluated, and unlabeled data is never touched unless some
// active term wants it.
inline std::vector<IterRecord> train_epoch(TrainState& state, const std::vector<Sample>& labeled,
                                           const std::vector<Sample>& unlabeled) {
    if (labeled.empty()) throw std::invalid_argument("train_epoch: labeled set must be nonempty");
    const TrainConfig& cfg = state.cfg;
    if (state.steps_per_epoch == 0) {
        state.steps_per_epoch = static_cast<std::int64_t>(std::max(labeled.size(), unlabeled.size()));
        state.total_steps = state.steps_per_epoch * std::max(1, cfg.epochs);
    }
    const std::int64_t n_iters = state.steps_per_epoch;
    const SupLossFn sup_fn = make_sup_loss(cfg);

    const std::uint64_t e = static_cast<std::uint64_t>(state.epoch);
    Rng base(cfg.seed);
    detail::BatchSampler sampler_l(labeled, base.fork((1ull << 20) + e));
    detail::BatchSampler sampler_u(unlabeled, base.fork((2ull << 20) + e));
    Rng aug_l = base.fork((3ull << 20) + e);
    Rng aug_u = base.fork((4ull << 20) + e);
    Rng jig = base.fork((5ull << 20) + e);
    Rng aug_teacher = base.fork((6ull << 20) + e);

    const bool wants_unlabeled = state.uses_ssl() || state.uses_consistency() || state.uses_cps();
    if (wants_unlabeled && unlabeled.empty() && !state.warned_empty_unlabeled) {
        std::cerr << "[trainer] warning: unlabeled set is empty; unsupervised terms fall back to their "
                     "labeled-only parts\n";
        state.warned_empty_unlabeled = true;
    }

    std::vector<IterRecord> records;
    records.reserve(static_cast<std::size_t>(n_iters));

    for (std::int64_t i = 0; i < n_iters; ++i) {
        const auto refs_l = detail::draw_refs(sampler_l, cfg.batch_labeled);
        detail::Batch bl = detail::make_views(refs_l, aug_l, cfg.crop_size, cfg.augment);
        detail::Batch bu;
        std::vector<const Sample*> refs_u;
        if (wants_unlabeled && !unlabeled.empty()) {
            refs_u = detail::draw_refs(sampler_u, cfg.batch_unlabeled);
            bu = detail::make_views(refs_u, aug_u, cfg.crop_size, cfg.augment);
        }

        IterRecord rec;
        rec.iter = state.step;
        rec.epoch = state.epoch;
        rec.lr = poly_lr(state.step, state.total_steps, cfg.lr0, cfg.poly_power);

        Tape tape;
        bool stepped = false;
        {
            TapeScope scope(tape);
            Tensor sup, ssl, ssup;

            if (cfg.method == Method::CoTeaching) {
                Tensor la_l = state.student.forward(bl.images);
                Tensor lb_l = state.net_b->forward(bl.images);
                if (cfg.lambda0 > 0.0) sup = add(sup_fn(la_l, bl.masks), sup_fn(lb_l, bl.masks));
                if (state.uses_cps()) {
                    Tensor cps_labeled = ct_cps_term(la_l, lb_l);
                    if (bu.images.defined()) {
                        Tensor cps_unlabeled =
                            ct_cps_term(state.student.forward(bu.images), state.net_b->forward(bu.images));
                        ssup = add(cps_unlabeled, cps_labeled);
                    } else {
                        ssup = cps_labeled;
                    }
                }
            } else {
                Tensor logits_l;
                if (cfg.lambda0 > 0.0 || state.uses_consistency()) logits_l = state.student.forward(bl.images);
                if (cfg.lambda0 > 0.0) sup = sup_fn(logits_l, bl.masks);
                if (state.uses_ssl()) {
                    ssl = ssl_loss(state.student, *state.pset, bl.images, bu.images, jig);
                    if (cfg.jigsaw_segmentation) {
                        // optional variant: segmentation trained on jigsawed
                        // labeled crops against equally jigsawed masks
                        Tensor jig_images(bl.images.shape());
                        IntTensor jig_masks(bl.masks.shape);
                        const int crop = cfg.crop_size;
                        for (int bi = 0; bi < cfg.batch_labeled; ++bi) {
                            const int jidx = static_cast<int>(jig.uniform_int(static_cast<std::uint64_t>(state.pset->k)));
                            const JigsawPerm& perm = state.pset->perms[static_cast<std::size_t>(jidx)];
                            for (int c = 0; c < 3; ++c) {
                                const std::size_t off = (static_cast<std::size_t>(bi) * 3 + c) *
                                                        static_cast<std::size_t>(crop) * crop;
                                detail::relocate_patches(bl.images.data() + off, jig_images.data_mut() + off, crop,
                                                         crop, perm);
                            }
                            const std::size_t moff = static_cast<std::size_t>(bi) * crop * crop;
                            detail::relocate_patches(bl.masks.v.data() + moff, jig_masks.v.data() + moff, crop,
                                                     crop, perm);
                        }
                        sup = sup.defined() ? add(sup, sup_fn(state.student.forward(jig_images), jig_masks))
                                            : sup_fn(state.student.forward(jig_images), jig_masks);
                    }
                }
                if (state.uses_consistency()) {
                    detail::Batch tl = cfg.independent_teacher_aug
                                           ? detail::make_views(refs_l, aug_teacher, cfg.crop_size, cfg.augment)
                                           : bl;
                    Tensor t_logits_l, t_logits_u;
                    {
                        NoGradScope ng;
                        t_logits_l = state.teacher->net.forward(tl.images);
                        if (bu.images.defined()) {
                            detail::Batch tu = cfg.independent_teacher_aug
                                                   ? detail::make_views(refs_u, aug_teacher, cfg.crop_size,
                                                                        cfg.augment)
                                                   : bu;
                            t_logits_u = state.teacher->net.forward(tu.images);
                        }
                    }
                    ssup = consistency_mse(logits_l, t_logits_l);
                    if (bu.images.defined())
                        ssup = add(ssup, consistency_mse(state.student.forward(bu.images), t_logits_u));
                }
            }

            Tensor total = total_loss(sup, ssl, ssup, cfg);
            rec.loss_total = total.item();
            rec.loss_sup = sup.defined() ? sup.item() : 0.0;
            rec.loss_ssl = ssl.defined() ? ssl.item() : 0.0;
            rec.loss_ssup = ssup.defined() ? ssup.item() : 0.0;

            if (total.has_node()) {
                for (Tensor* p : state.student.parameters()) p->zero_grad();
                if (state.net_b)
                    for (Tensor* p : state.net_b->parameters()) p->zero_grad();
                backward(total);
                stepped = true;
            }
        }
        if (stepped) {
            sgd_momentum_step(state.student.parameters(), state.opt_a, rec.lr, cfg.momentum);
            if (state.net_b) sgd_momentum_step(state.net_b->parameters(), state.opt_b, rec.lr, cfg.momentum);
        }
        if (state.teacher) ema_update(*state.teacher, state.student);
        records.push_back(rec);
        ++state.step;
    }
    ++state.epoch;
    return records;
}

// ---------------------------------------------------------------------------
// fit(): E epochs with per-epoch evaluation, checkpoints and a metrics CSV
// ---------------------------------------------------------------------------

inline Checkpoint build_checkpoint(TrainState& state) {
    Checkpoint ckpt;
    ckpt.config = state.net_cfg;
    add_net_params(ckpt, state.student, "student.");
    if (state.teacher) add_net_params(ckpt, state.teacher->net, "teacher.");
    if (state.net_b) add_net_params(ckpt, *state.net_b, "peer_b.");
    {
        std::size_t i = 0;
        state.student.visit_params([&](const std::string& name, Tensor& t) {
            ckpt.add("opt_a." + name, Tensor::from(t.shape(), state.opt_a.velocity[i]));
            ++i;
        });
    }
    if (state.net_b) {
        std::size_t i = 0;
        state.net_b->visit_params([&](const std::string& name, Tensor& t) {
            ckpt.add("opt_b." + name, Tensor::from(t.shape(), state.opt_b.velocity[i]));
            ++i;
        });
    }
    ckpt.add("trainer.step", Tensor::scalar(static_cast<double>(state.step)));
    ckpt.add("trainer.epoch", Tensor::scalar(static_cast<double>(state.epoch)));
    return ckpt;
}

inline void restore_trainer_state(TrainState& state, const Checkpoint& ckpt) {
    load_net_params(ckpt, state.student, "student.");
    if (state.teacher) load_net_params(ckpt, state.teacher->net, "teacher.");
    if (state.net_b) load_net_params(ckpt, *state.net_b, "peer_b.");
    {
        std::size_t i = 0;
        state.student.visit_params([&](const std::string& name, Tensor& t) {
            const Tensor* v = ckpt.find("opt_a." + name);
            if (v && v->size() == state.opt_a.velocity[i].size())
                state.opt_a.velocity[i].assign(v->data(), v->data() + v->size());
            ++i;
        });
    }
    if (state.net_b) {
        std::size_t i = 0;
        state.net_b->visit_params([&](const std::string& name, Tensor& t) {
            const Tensor* v = ckpt.find("opt_b." + name);
            if (v && v->size() == state.opt_b.velocity[i].size())
                state.opt_b.velocity[i].assign(v->data(), v->data() + v->size());
            ++i;
        });
    }
    if (const Tensor* t = ckpt.find("trainer.step")) state.step = static_cast<std::int64_t>(t->item());
    if (const Tensor* t = ckpt.find("trainer.epoch")) state.epoch = static_cast<int>(t->item());
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_csv_row(std::ostream& os, const IterRecord& r) {
    os << r.iter << ',' << r.epoch << ',' << fmt_double(r.lr) << ',' << fmt_double(r.loss_total) << ','
       << fmt_double(r.loss_sup) << ',' << fmt_double(r.loss_ssl) << ',' << fmt_double(r.loss_ssup) << ',';
    if (r.has_miou) os << fmt_double(r.miou_val);
    os << '\n';
}

}  // namespace detail

struct FitResult {
    std::vector<IterRecord> history;
    double final_miou = 0.0;
    double final_pixel_acc = 0.0;
};

// Runs E epochs of Algorithm 1. Evaluates on `val` (the labeled training set
// when null) at every epoch boundary; writes metrics.csv, per-epoch
// checkpoints and ckpt_final.seln under out_dir when provided.
inline FitResult fit(TrainState& state, const std::vector<Sample>& labeled, const std::vector<Sample>& unlabeled,
                     const std::vector<Sample>* val = nullptr, const std::filesystem::path& out_dir = {}) {
    const std::vector<Sample>& eval_set = val ? *val : labeled;
    FitResult result;

    std::ofstream csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        csv.open(out_dir / "metrics.csv");
        if (!csv) throw std::runtime_error("fit: cannot open metrics csv under " + out_dir.string());
        csv << "iter,epoch,lr,loss_total,loss_sup,loss_ssl,loss_ssup,miou_val\n";
    }

    if (state.steps_per_epoch == 0 && !labeled.empty()) {
        state.steps_per_epoch = static_cast<std::int64_t>(std::max(labeled.size(), unlabeled.size()));
        state.total_steps = state.steps_per_epoch * std::max(1, state.cfg.epochs);
    }

    for (int e = state.epoch; e < state.cfg.epochs; ++e) {
        std::vector<IterRecord> records = train_epoch(state, labeled, unlabeled);
        const EvalResult ev = evaluate(state.student, eval_set);
        if (!records.empty()) {
            records.back().has_miou = true;
            records.back().miou_val = ev.miou;
        }
        result.final_miou = ev.miou;
        result.final_pixel_acc = ev.pixel_acc;
        for (const IterRecord& r : records) {
            const bool log = (r.iter % state.cfg.log_every == 0) || r.has_miou;
            if (log && csv.is_open()) detail::write_csv_row(csv, r);
            result.history.push_back(r);
        }
        if (!out_dir.empty()) {
            save_checkpoint(out_dir / ("ckpt_epoch_" + std::to_string(state.epoch - 1) + ".seln"),
                            build_checkpoint(state));
        }
    }

    if (result.history.empty()) {
        // E = 0 (or nothing left to train): weights untouched, still evaluate
        const EvalResult ev = evaluate(state.student, eval_set);
        result.final_miou = ev.miou;
        result.final_pixel_acc = ev.pixel_acc;
    }
    if (!out_dir.empty()) save_checkpoint(out_dir / "ckpt_final.seln", build_checkpoint(state));
    return result;
}

}  // namespace selene
