#pragma once

#include <string>
#include <vector>

#include "bevflow/tensor.hpp"

namespace bevflow {

// Parameters handed out by collect() share storage with the layer, so the
// optimizer and checkpoint loader mutate the live weights.
struct ParamSet {
    std::vector<Parameter> trainable;
    std::vector<Parameter> buffers;  // persistent non-learnable state (running stats)

    void add(const std::string& name, const Tensor& t) { trainable.push_back({name, t}); }
    void add_buffer(const std::string& name, const Tensor& t) { buffers.push_back({name, t}); }
    std::vector<Parameter> all() const;
    int64_t count_trainable() const;
};

int64_t count_parameters(const ParamSet& params);

struct Linear {
    Tensor weight;  // (out, in)
    Tensor bias;    // (out) when present
    bool has_bias = true;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool bias = true);
    Tensor forward(const Tensor& x) const;  // (..., in) -> (..., out)
    void collect(const std::string& prefix, ParamSet& out) const;
};

struct Conv2d {
    Tensor weight;  // (out, in/groups, k, k)
    Tensor bias;
    int stride = 1, padding = 0, groups = 1;
    bool has_bias = true;

    Conv2d() = default;
    Conv2d(int64_t in, int64_t out, int k, int stride, int padding, Rng& rng, int groups = 1,
           bool bias = true);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

struct BatchNorm2d {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int64_t channels);
    Tensor forward(const Tensor& x, bool training) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    float eps = 1e-5f;

    LayerNorm() = default;
    explicit LayerNorm(int64_t dim);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamSet& out) const;
};

// Decoupled weight decay Adam. Parameters without an accumulated gradient are
// treated as having zero gradient (still subject to decay).
class AdamW {
public:
    AdamW(std::vector<Parameter> params, float lr, float weight_decay = 0.01f, float beta1 = 0.9f,
          float beta2 = 0.999f, float eps = 1e-8f);

    void set_lr(float lr) { lr_ = lr; }
    float lr() const { return lr_; }
    void step();
    void zero_grad();

private:
    std::vector<Parameter> params_;
    std::vector<std::vector<float>> m_, v_;
    float lr_, weight_decay_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// lr(step) = lr0 * (1 - step/total)^power, clamped at 0 for step >= total.
float polynomial_lr(float lr0, int64_t step, int64_t total_steps, float power);

}  // namespace bevflow
