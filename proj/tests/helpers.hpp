#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bevflow/tensor.hpp"

namespace bevflow::testing {

inline bool close(float a, float b, float rtol = 1e-3f, float atol = 1e-3f) {
    return std::fabs(a - b) <= atol + rtol * std::max(std::fabs(a), std::fabs(b));
}

// Scalar loss with randomized weights so gradients stay O(1).
inline Tensor weighted_sum(const Tensor& t, Rng& rng) {
    Tensor w = Tensor::rand_uniform(t.shape(), rng, 0.5f, 1.5f);
    return sum_all(mul(t, w));
}

struct GradCheckResult {
    bool ok = true;
    float worst_abs = 0;
    float analytic = 0, numeric = 0;
    std::string where;
};

// Central finite differences (step h) against reverse-mode gradients for every
// element of every input listed in `wrt`. `loss_fn` must rebuild the graph
// from the same tensors each call.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn,
                                 const std::vector<Tensor>& wrt, float h = 1e-3f,
                                 float rtol = 1e-3f, float atol = 1e-3f) {
    for (const Tensor& t : wrt) {
        const_cast<Tensor&>(t).zero_grad();
    }
    {
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    std::vector<std::vector<float>> analytic;
    for (const Tensor& t : wrt) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<float>(t.data().size(), 0.0f));
    }

    GradCheckResult res;
    float worst_ratio = 0;
    for (size_t ti = 0; ti < wrt.size(); ++ti) {
        auto& data = const_cast<Tensor&>(wrt[ti]).mutable_data();
        for (size_t i = 0; i < data.size(); ++i) {
            const float orig = data[i];
            const float a = analytic[ti][i];
            float numeric = 0;
            bool elem_ok = false;
            // a piecewise-linear kink inside the FD window corrupts the
            // quotient; retry with smaller steps until the window clears it
            for (float step : {h, h / 2, h / 4, h / 8}) {
                data[i] = orig + step;
                const float up = loss_fn().item();
                data[i] = orig - step;
                const float dn = loss_fn().item();
                data[i] = orig;
                numeric = (up - dn) / (2.0f * step);
                if (close(a, numeric, rtol, atol)) {
                    elem_ok = true;
                    break;
                }
            }
            const float err = std::fabs(a - numeric);
            const float ratio = err / (atol + rtol * std::max(std::fabs(a), std::fabs(numeric)));
            if (!elem_ok && ratio > worst_ratio) {
                worst_ratio = ratio;
                res.worst_abs = err;
                res.analytic = a;
                res.numeric = numeric;
                res.where = "input " + std::to_string(ti) + " elem " + std::to_string(i);
            }
            if (!elem_ok) res.ok = false;
        }
    }
    return res;
}

}  // namespace bevflow::testing
