#include "bevflow/nn.hpp"

#include <cmath>

namespace bevflow {

std::vector<Parameter> ParamSet::all() const {
    std::vector<Parameter> out = trainable;
    out.insert(out.end(), buffers.begin(), buffers.end());
    return out;
}

int64_t ParamSet::count_trainable() const {
    int64_t n = 0;
    for (const auto& p : trainable) n += p.value.numel();
    return n;
}

int64_t count_parameters(const ParamSet& params) { return params.count_trainable(); }

namespace {

Tensor init_uniform(Shape shape, int64_t fan_in, Rng& rng) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    return Tensor::rand_uniform(std::move(shape), rng, -bound, bound, /*requires_grad=*/true);
}

}  // namespace

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool bias) : has_bias(bias) {
    weight = init_uniform({out, in}, in, rng);
    if (bias) this->bias = init_uniform({out}, in, rng);
}

Tensor Linear::forward(const Tensor& x) const {
    // x: (..., in). Flatten to rows, multiply by weight^T, restore shape.
    const int64_t in = weight.dim(1), out = weight.dim(0);
    if (x.dim(-1) != in) {
        throw ShapeError("Linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    const int64_t rows = x.numel() / in;
    Tensor flat = reshape(x, {rows, in});
    Tensor wt = permute(weight, {1, 0});
    Tensor y = matmul(flat, wt);
    if (has_bias) y = add_bias_rows(y, bias);
    Shape out_shape = x.shape();
    out_shape.back() = out;
    return reshape(y, out_shape);
}

void Linear::collect(const std::string& prefix, ParamSet& out) const {
    out.add(prefix + ".weight", weight);
    if (has_bias) out.add(prefix + ".bias", bias);
}

Conv2d::Conv2d(int64_t in, int64_t out, int k, int stride, int padding, Rng& rng, int groups,
               bool bias)
    : stride(stride), padding(padding), groups(groups), has_bias(bias) {
    const int64_t fan_in = (in / groups) * k * k;
    weight = init_uniform({out, in / groups, k, k}, fan_in, rng);
    if (bias) this->bias = init_uniform({out}, fan_in, rng);
}

Tensor Conv2d::forward(const Tensor& x) const {
    return conv2d(x, weight, has_bias ? bias : Tensor(), stride, padding, groups);
}

void Conv2d::collect(const std::string& prefix, ParamSet& out) const {
    out.add(prefix + ".weight", weight);
    if (has_bias) out.add(prefix + ".bias", bias);
}

BatchNorm2d::BatchNorm2d(int64_t channels) {
    gamma = Tensor::full({channels}, 1.0f, true);
    beta = Tensor::zeros({channels}, true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) const {
    auto& rm = const_cast<Tensor&>(running_mean).mutable_data();
    auto& rv = const_cast<Tensor&>(running_var).mutable_data();
    return batchnorm2d(x, gamma, beta, rm, rv, training, momentum, eps);
}

void BatchNorm2d::collect(const std::string& prefix, ParamSet& out) const {
    out.add(prefix + ".weight", gamma);
    out.add(prefix + ".bias", beta);
    out.add_buffer(prefix + ".running_mean", running_mean);
    out.add_buffer(prefix + ".running_var", running_var);
}

LayerNorm::LayerNorm(int64_t dim) {
    gamma = Tensor::full({dim}, 1.0f, true);
    beta = Tensor::zeros({dim}, true);
}

Tensor LayerNorm::forward(const Tensor& x) const { return layernorm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParamSet& out) const {
    out.add(prefix + ".weight", gamma);
    out.add(prefix + ".bias", beta);
}

AdamW::AdamW(std::vector<Parameter> params, float lr, float weight_decay, float beta1, float beta2,
             float eps)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), beta1_(beta1),
      beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].value.data().size(), 0.0f);
        v_[i].assign(params_[i].value.data().size(), 0.0f);
    }
}

void AdamW::step() {
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto impl = params_[i].value.impl();
        auto& w = impl->data;
        const bool has_grad = !impl->grad.empty();
        for (size_t j = 0; j < w.size(); ++j) {
            const float g = has_grad ? impl->grad[j] : 0.0f;
            m_[i][j] = beta1_ * m_[i][j] + (1.0f - beta1_) * g;
            v_[i][j] = beta2_ * v_[i][j] + (1.0f - beta2_) * g * g;
            const float mhat = m_[i][j] / bc1;
            const float vhat = v_[i][j] / bc2;
            w[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

float polynomial_lr(float lr0, int64_t step, int64_t total_steps, float power) {
    if (total_steps <= 0) return lr0;
    const float frac = std::min(1.0f, static_cast<float>(step) / static_cast<float>(total_steps));
    return lr0 * std::pow(1.0f - frac, power);
}

}  // namespace bevflow
