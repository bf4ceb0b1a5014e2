#pragma once

#include <functional>
#include <string>
#include <vector>

#include "selene/tensor.hpp"

namespace selene {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
    std::size_t checked = 0;
};

// Central-difference check of reverse-mode gradients. `build_loss` must
// recompute the scalar loss from the current parameter values on every call;
// parameters are perturbed in place. rel_err = |analytic - fd| / (|fd| + 1e-8).
// max_elems_per_param > 0 checks an evenly strided subset (for large nets).
inline GradCheckResult gradcheck(const std::string& name, const std::function<Tensor()>& build_loss,
                                 const std::vector<Tensor*>& params, double h = 1e-4, double tol = 1e-4,
                                 std::size_t max_elems_per_param = 0) {
    GradCheckResult res;
    res.name = name;

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        for (Tensor* p : params) {
            if (!p->requires_grad()) throw std::logic_error("gradcheck: parameter without grad buffer");
            p->zero_grad();
        }
        Tensor loss = build_loss();
        backward(loss);
        for (Tensor* p : params) analytic.push_back(p->grad());
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        const std::size_t n = p.size();
        std::size_t step = 1;
        if (max_elems_per_param > 0 && n > max_elems_per_param) step = n / max_elems_per_param;
        for (std::size_t i = 0; i < n; i += step) {
            double* v = p.data_mut();
            const double saved = v[i];
            v[i] = saved + h;
            const double lp = build_loss().item();
            v[i] = saved - h;
            const double lm = build_loss().item();
            v[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double rel = std::abs(analytic[pi][i] - fd) / (std::abs(fd) + 1e-8);
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.checked;
        }
    }
    res.pass = res.max_rel_err < tol;
    return res;
}

}  // namespace selene
