#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "bevflow/common.hpp"

namespace bevflow {

// Dense float32 tensor, row-major. Values are immutable once built; only the
// gradient buffer accumulates. Reverse-mode autodiff records onto the
// currently active Tape (see below); with no active tape, ops run forward-only.
struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // empty == absent; sized like data when present

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor rand_uniform(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                               bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim(int i) const;
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return impl_->numel(); }

    const std::vector<float>& data() const { return impl_->data; }
    std::vector<float>& mutable_data() { return impl_->data; }
    const std::vector<float>& grad() const { return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    float item() const;
    float at(std::initializer_list<int64_t> idx) const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Records the operations of a forward pass in execution order. backward()
// walks the list in reverse, pulling gradients from each op output into its
// operands. Nodes whose output never received a gradient are skipped, so
// parameters not connected to the loss keep their grad buffers untouched.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void backward(const Tensor& scalar_loss);

    static Tape* active();
    void record(std::shared_ptr<TensorImpl> out, std::function<void(TensorImpl&)> pull);
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::shared_ptr<TensorImpl> out;
        std::function<void(TensorImpl&)> pull;
    };
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
};

// A named learnable tensor. Names form dotted paths, unique within a model.
struct Parameter {
    std::string name;
    Tensor value;
};

// ---- ops ----------------------------------------------------------------
// Elementwise ops require identical shapes unless one side is a single
// element (scalar broadcast). matmul broadcasts leading dims when equal or 1.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor mul_scalar(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups = 1);
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<float>& running_mean, std::vector<float>& running_var,
                   bool training, float momentum, float eps);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor leaky_relu(const Tensor& x, float slope);
Tensor gelu(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor log_op(const Tensor& x);
Tensor smooth_l1(const Tensor& x, float delta = 1.0f);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<int>& order);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);

Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);
Tensor scatter_add_rows(const Tensor& values, const std::vector<int64_t>& index, int64_t out_rows);
// Samples map (C,H,W) at continuous (row,col) positions with bilinear weights;
// out-of-grid reads are zero. Coordinates carry no gradient.
Tensor bilinear_sample(const Tensor& map, const std::vector<float>& rows,
                       const std::vector<float>& cols, int64_t out_h, int64_t out_w);

// y[..., j] = x[..., j] + bias[j]; bias length matches the last axis.
Tensor add_bias_rows(const Tensor& x, const Tensor& bias);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);  // reduces one axis away
// Mean of the k largest elements; gradient flows into the kept subset only.
Tensor topk_mean(const Tensor& x, int64_t k);
// Per-pixel outer product: out[d,c,i,j] = p[d,i,j] * f[c,i,j] for each leading batch index.
Tensor depth_outer(const Tensor& probs, const Tensor& feat);

}  // namespace bevflow
