#include "bevflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace bevflow {

namespace {

thread_local Tape* g_active_tape = nullptr;

void check_shape_positive(const Shape& s) {
    for (int64_t d : s) {
        if (d <= 0) throw ShapeError("tensor shape entries must be positive, got " + shape_str(s));
    }
}

bool grad_enabled(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ins) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void accumulate(TensorImpl& dst, const std::vector<float>& g) {
    dst.ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad) {
    check_shape_positive(shape);
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    check_shape_positive(shape);
    std::vector<float> d(static_cast<size_t>(numel_of(shape)), value);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad) {
    check_shape_positive(shape);
    std::vector<float> d(static_cast<size_t>(numel_of(shape)));
    std::uniform_real_distribution<float> dist(lo, hi);
    for (auto& v : d) v = dist(rng);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

int64_t Tensor::dim(int i) const {
    if (i < 0) i += rank();
    if (i < 0 || i >= rank()) throw ShapeError("dim index out of range");
    return impl_->shape[static_cast<size_t>(i)];
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

float Tensor::at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ShapeError("at(): index rank mismatch");
    int64_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
        off = off * impl_->shape[static_cast<size_t>(i)] + v;
        ++i;
    }
    return impl_->data[static_cast<size_t>(off)];
}

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorImpl> out, std::function<void(TensorImpl&)> pull) {
    nodes_.push_back({std::move(out), std::move(pull)});
}

void Tape::backward(const Tensor& scalar_loss) {
    if (scalar_loss.numel() != 1) {
        throw ShapeError("backward() expects a scalar loss, got " + shape_str(scalar_loss.shape()));
    }
    auto root = scalar_loss.impl();
    root->ensure_grad();
    root->grad[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->out->grad.empty()) it->pull(*it->out);
    }
}

// ---- elementwise helpers --------------------------------------------------

namespace {

// Registers a recorded unary op: out = f(x) with df supplied per element.
Tensor unary_op(const Tensor& x, const std::function<float(float)>& f,
                const std::function<float(float, float)>& df_by_x_and_y) {
    std::vector<float> out(x.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
    Tensor y(x.shape(), std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto yi = y.impl();
        Tape::active()->record(yi, [xi, df_by_x_and_y](TensorImpl& o) {
            xi->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) {
                xi->grad[i] += o.grad[i] * df_by_x_and_y(xi->data[i], o.data[i]);
            }
        });
    }
    return y;
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw ShapeError("elementwise op shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const Shape& out_shape = a_scalar ? b.shape() : a.shape();
    const size_t n = static_cast<size_t>(numel_of(out_shape));
    std::vector<float> out(n);
    const auto& da = a.data();
    const auto& db = b.data();
    for (size_t i = 0; i < n; ++i) {
        const float va = a_scalar ? da[0] : da[i];
        const float vb = b_scalar ? db[0] : db[i];
        switch (kind) {
            case BinKind::Add: out[i] = va + vb; break;
            case BinKind::Sub: out[i] = va - vb; break;
            case BinKind::Mul: out[i] = va * vb; break;
        }
    }
    Tensor y(out_shape, std::move(out));
    if (grad_enabled({&a, &b})) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi = b.impl();
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        Tape::active()->record(y.impl(), [ai, bi, kind, a_scalar, b_scalar, need_a,
                                          need_b](TensorImpl& o) {
            if (need_a) {
                ai->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) {
                    float g = o.grad[i];
                    if (kind == BinKind::Mul) g *= b_scalar ? bi->data[0] : bi->data[i];
                    ai->grad[a_scalar ? 0 : i] += g;
                }
            }
            if (need_b) {
                bi->ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) {
                    float g = o.grad[i];
                    if (kind == BinKind::Sub) g = -g;
                    if (kind == BinKind::Mul) g *= a_scalar ? ai->data[0] : ai->data[i];
                    bi->grad[b_scalar ? 0 : i] += g;
                }
            }
        });
    }
    return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul); }

Tensor neg(const Tensor& a) {
    return unary_op(a, [](float v) { return -v; }, [](float, float) { return -1.0f; });
}

Tensor mul_scalar(const Tensor& a, float s) {
    return unary_op(a, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& a, float s) {
    return unary_op(a, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor leaky_relu(const Tensor& x, float slope) {
    return unary_op(
        x, [slope](float v) { return v >= 0.0f ? v : slope * v; },
        [slope](float v, float) { return v >= 0.0f ? 1.0f : slope; });
}

Tensor gelu(const Tensor& x) {
    constexpr float kInvSqrt2 = 0.7071067811865475f;
    constexpr float kInvSqrt2Pi = 0.3989422804014327f;
    return unary_op(
        x, [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
        [](float v, float) {
            const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            return cdf + v * pdf;
        });
}

Tensor exp_op(const Tensor& x) {
    return unary_op(x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor log_op(const Tensor& x) {
    return unary_op(x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

Tensor smooth_l1(const Tensor& x, float delta) {
    return unary_op(
        x,
        [delta](float v) {
            const float a = std::fabs(v);
            return a < delta ? 0.5f * v * v / delta : a - 0.5f * delta;
        },
        [delta](float v, float) {
            if (v > delta) return 1.0f;
            if (v < -delta) return -1.0f;
            return v / delta;
        });
}

// ---- matmul ---------------------------------------------------------------

namespace {

// Pads shape to target rank with leading ones.
Shape pad_rank(const Shape& s, size_t rank) {
    Shape out(rank, 1);
    std::copy(s.begin(), s.end(), out.begin() + static_cast<int64_t>(rank - s.size()));
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul requires rank>=2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const size_t rank = std::max(a.shape().size(), b.shape().size());
    Shape sa = pad_rank(a.shape(), rank);
    Shape sb = pad_rank(b.shape(), rank);
    const int64_t m = sa[rank - 2], k = sa[rank - 1];
    const int64_t kb = sb[rank - 2], n = sb[rank - 1];
    if (k != kb) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " @ " +
                         shape_str(b.shape()));
    }
    Shape lead(rank - 2);
    for (size_t i = 0; i + 2 < rank; ++i) {
        int64_t da = sa[i], db = sb[i];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("matmul leading dims not broadcastable: " + shape_str(a.shape()) +
                             " @ " + shape_str(b.shape()));
        }
        lead[i] = std::max(da, db);
    }
    const int64_t batches = numel_of(lead);
    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);

    // Flat offsets of each broadcast batch into a and b.
    auto batch_offsets = [&](const Shape& s, int64_t mat_elems) {
        auto offs = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(batches), 0);
        for (int64_t batch = 0; batch < batches; ++batch) {
            int64_t off = 0, rem = batch;
            for (int64_t i = static_cast<int64_t>(rank) - 3; i >= 0; --i) {
                const int64_t idx = rem % lead[static_cast<size_t>(i)];
                rem /= lead[static_cast<size_t>(i)];
                int64_t stride = mat_elems;
                for (int64_t j = static_cast<int64_t>(rank) - 3; j > i; --j) {
                    stride *= s[static_cast<size_t>(j)];
                }
                if (s[static_cast<size_t>(i)] != 1) off += idx * stride;
            }
            (*offs)[static_cast<size_t>(batch)] = off;
        }
        return offs;
    };
    auto offs_a = batch_offsets(sa, m * k);
    auto offs_b = batch_offsets(sb, k * n);

    std::vector<float> out(static_cast<size_t>(batches * m * n), 0.0f);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
#pragma omp parallel for schedule(static)
    for (int64_t bi = 0; bi < batches; ++bi) {
        const float* A = pa + (*offs_a)[static_cast<size_t>(bi)];
        const float* B = pb + (*offs_b)[static_cast<size_t>(bi)];
        float* C = out.data() + bi * m * n;
        for (int64_t i = 0; i < m; ++i) {
            float* crow = C + i * n;
            for (int64_t kk = 0; kk < k; ++kk) {
                const float av = A[i * k + kk];
                if (av == 0.0f) continue;
                const float* brow = B + kk * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }

    Tensor y(out_shape, std::move(out));
    if (grad_enabled({&a, &b})) {
        y.set_requires_grad(true);
        auto ai = a.impl();
        auto bi_ = b.impl();
        const bool need_a = a.requires_grad();
        const bool need_b = b.requires_grad();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            if (need_a) ai->ensure_grad();
            if (need_b) bi_->ensure_grad();
            for (int64_t bt = 0; bt < batches; ++bt) {
                const float* G = o.grad.data() + bt * m * n;
                const float* A = ai->data.data() + (*offs_a)[static_cast<size_t>(bt)];
                const float* B = bi_->data.data() + (*offs_b)[static_cast<size_t>(bt)];
                if (need_a) {
                    float* dA = ai->grad.data() + (*offs_a)[static_cast<size_t>(bt)];
                    for (int64_t i = 0; i < m; ++i) {
                        for (int64_t kk = 0; kk < k; ++kk) {
                            float acc = 0.0f;
                            const float* brow = B + kk * n;
                            const float* grow = G + i * n;
                            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            dA[i * k + kk] += acc;
                        }
                    }
                }
                if (need_b) {
                    float* dB = bi_->grad.data() + (*offs_b)[static_cast<size_t>(bt)];
                    for (int64_t kk = 0; kk < k; ++kk) {
                        for (int64_t i = 0; i < m; ++i) {
                            const float av = A[i * k + kk];
                            if (av == 0.0f) continue;
                            const float* grow = G + i * n;
                            float* drow = dB + kk * n;
                            for (int64_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return y;
}

// ---- conv2d ---------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw ShapeError("conv2d expects NCHW input and OIKK weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    }
    if (stride < 1 || padding < 0 || groups < 1) throw ConfigError("conv2d: bad stride/padding/groups");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0), Cin_g = w.dim(1), K = w.dim(2);
    if (w.dim(3) != K) throw ShapeError("conv2d: only square kernels supported");
    if (C % groups != 0 || Cout % groups != 0 || Cin_g != C / groups) {
        throw ShapeError("conv2d channel/group mismatch: input " + shape_str(x.shape()) +
                         ", weight " + shape_str(w.shape()) + ", groups " + std::to_string(groups));
    }
    if (bias.defined() && bias.numel() != Cout) throw ShapeError("conv2d: bias length mismatch");
    const int64_t Hp = H + 2 * padding, Wp = W + 2 * padding;
    if (K > Hp || K > Wp) {
        throw ShapeError("conv2d kernel " + std::to_string(K) + " larger than padded input " +
                         std::to_string(Hp) + "x" + std::to_string(Wp));
    }
    const int64_t Ho = (Hp - K) / stride + 1;
    const int64_t Wo = (Wp - K) / stride + 1;
    const int64_t cpg_in = C / groups, cpg_out = Cout / groups;

    std::vector<float> out(static_cast<size_t>(N * Cout * Ho * Wo), 0.0f);
    const float* px = x.data().data();
    const float* pw = w.data().data();
    const float* pbias = bias.defined() ? bias.data().data() : nullptr;

#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t g = co / cpg_out;
            float* dst = out.data() + ((n * Cout + co) * Ho) * Wo;
            const float b0 = pbias ? pbias[co] : 0.0f;
            for (int64_t i = 0; i < Ho * Wo; ++i) dst[i] = b0;
            for (int64_t ci = 0; ci < cpg_in; ++ci) {
                const float* src = px + ((n * C + g * cpg_in + ci) * H) * W;
                const float* ker = pw + ((co * cpg_in + ci) * K) * K;
                for (int64_t kh = 0; kh < K; ++kh) {
                    for (int64_t kw = 0; kw < K; ++kw) {
                        const float wv = ker[kh * K + kw];
                        if (wv == 0.0f) continue;
                        for (int64_t oh = 0; oh < Ho; ++oh) {
                            const int64_t ih = oh * stride + kh - padding;
                            if (ih < 0 || ih >= H) continue;
                            const float* srow = src + ih * W;
                            float* drow = dst + oh * Wo;
                            for (int64_t ow = 0; ow < Wo; ++ow) {
                                const int64_t iw = ow * stride + kw - padding;
                                if (iw < 0 || iw >= W) continue;
                                drow[ow] += wv * srow[iw];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor y({N, Cout, Ho, Wo}, std::move(out));
    if (grad_enabled({&x, &w, &bias})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = w.impl();
        auto bi = bias.defined() ? bias.impl() : nullptr;
        const bool need_x = x.requires_grad();
        const bool need_w = w.requires_grad();
        const bool need_b = bias.defined() && bias.requires_grad();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            const float* go = o.grad.data();
            if (need_x) {
                xi->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static)
                for (int64_t n = 0; n < N; ++n) {
                    for (int64_t cig = 0; cig < C; ++cig) {
                        const int64_t g = cig / cpg_in;
                        const int64_t ci = cig % cpg_in;
                        float* dx = xi->grad.data() + ((n * C + cig) * H) * W;
                        for (int64_t cof = 0; cof < cpg_out; ++cof) {
                            const int64_t co = g * cpg_out + cof;
                            const float* ker = wi->data.data() + ((co * cpg_in + ci) * K) * K;
                            const float* grow0 = go + ((n * Cout + co) * Ho) * Wo;
                            for (int64_t kh = 0; kh < K; ++kh) {
                                for (int64_t kw = 0; kw < K; ++kw) {
                                    const float wv = ker[kh * K + kw];
                                    if (wv == 0.0f) continue;
                                    for (int64_t oh = 0; oh < Ho; ++oh) {
                                        const int64_t ih = oh * stride + kh - padding;
                                        if (ih < 0 || ih >= H) continue;
                                        const float* grow = grow0 + oh * Wo;
                                        float* drow = dx + ih * W;
                                        for (int64_t ow = 0; ow < Wo; ++ow) {
                                            const int64_t iw = ow * stride + kw - padding;
                                            if (iw < 0 || iw >= W) continue;
                                            drow[iw] += wv * grow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (need_w) {
                wi->ensure_grad();
#pragma omp parallel for schedule(static)
                for (int64_t co = 0; co < Cout; ++co) {
                    const int64_t g = co / cpg_out;
                    for (int64_t ci = 0; ci < cpg_in; ++ci) {
                        float* dw = wi->grad.data() + ((co * cpg_in + ci) * K) * K;
                        for (int64_t n = 0; n < N; ++n) {
                            const float* src = xi->data.data() + ((n * C + g * cpg_in + ci) * H) * W;
                            const float* grow0 = go + ((n * Cout + co) * Ho) * Wo;
                            for (int64_t kh = 0; kh < K; ++kh) {
                                for (int64_t kw = 0; kw < K; ++kw) {
                                    float acc = 0.0f;
                                    for (int64_t oh = 0; oh < Ho; ++oh) {
                                        const int64_t ih = oh * stride + kh - padding;
                                        if (ih < 0 || ih >= H) continue;
                                        const float* srow = src + ih * W;
                                        const float* grow = grow0 + oh * Wo;
                                        for (int64_t ow = 0; ow < Wo; ++ow) {
                                            const int64_t iw = ow * stride + kw - padding;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += srow[iw] * grow[ow];
                                        }
                                    }
                                    dw[kh * K + kw] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (need_b) {
                bi->ensure_grad();
                for (int64_t n = 0; n < N; ++n) {
                    for (int64_t co = 0; co < Cout; ++co) {
                        const float* grow = go + ((n * Cout + co) * Ho) * Wo;
                        float acc = 0.0f;
                        for (int64_t i = 0; i < Ho * Wo; ++i) acc += grow[i];
                        bi->grad[static_cast<size_t>(co)] += acc;
                    }
                }
            }
        });
    }
    return y;
}

// ---- normalization --------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<float>& running_mean, std::vector<float>& running_var, bool training,
                   float momentum, float eps) {
    if (eps <= 0.0f) throw ConfigError("batchnorm2d: eps must be positive");
    if (x.rank() != 4) throw ShapeError("batchnorm2d expects NCHW, got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C) throw ShapeError("batchnorm2d: gamma/beta length mismatch");
    if (static_cast<int64_t>(running_mean.size()) != C ||
        static_cast<int64_t>(running_var.size()) != C) {
        throw ShapeError("batchnorm2d: running stats length mismatch");
    }
    const int64_t cnt = N * H * W;
    std::vector<float> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
    if (training) {
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* p = x.data().data() + ((n * C + c) * H) * W;
                for (int64_t i = 0; i < H * W; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(cnt);
            double v = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const float* p = x.data().data() + ((n * C + c) * H) * W;
                for (int64_t i = 0; i < H * W; ++i) {
                    const double d = p[i] - m;
                    v += d * d;
                }
            }
            mean[static_cast<size_t>(c)] = static_cast<float>(m);
            var[static_cast<size_t>(c)] = static_cast<float>(v / static_cast<double>(cnt));
            running_mean[static_cast<size_t>(c)] =
                (1.0f - momentum) * running_mean[static_cast<size_t>(c)] + momentum * mean[static_cast<size_t>(c)];
            running_var[static_cast<size_t>(c)] =
                (1.0f - momentum) * running_var[static_cast<size_t>(c)] + momentum * var[static_cast<size_t>(c)];
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    std::vector<float> inv_std(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
        inv_std[static_cast<size_t>(c)] = 1.0f / std::sqrt(var[static_cast<size_t>(c)] + eps);
    }
    std::vector<float> out(x.data().size());
    std::vector<float> xhat(x.data().size());
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
            const float* p = x.data().data() + ((n * C + c) * H) * W;
            float* q = out.data() + ((n * C + c) * H) * W;
            float* xh = xhat.data() + ((n * C + c) * H) * W;
            const float m = mean[static_cast<size_t>(c)], is = inv_std[static_cast<size_t>(c)];
            const float g = gamma.data()[static_cast<size_t>(c)], b = beta.data()[static_cast<size_t>(c)];
            for (int64_t i = 0; i < H * W; ++i) {
                xh[i] = (p[i] - m) * is;
                q[i] = g * xh[i] + b;
            }
        }
    }

    Tensor y(x.shape(), std::move(out));
    if (grad_enabled({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        const bool need_x = x.requires_grad();
        const bool need_g = gamma.requires_grad();
        const bool need_b = beta.requires_grad();
        auto saved_xhat = std::make_shared<std::vector<float>>(std::move(xhat));
        auto saved_inv = std::make_shared<std::vector<float>>(inv_std);
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            if (need_x) xi->ensure_grad();
            if (need_g) gi->ensure_grad();
            if (need_b) bi->ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const float* go = o.grad.data() + ((n * C + c) * H) * W;
                    const float* xh = saved_xhat->data() + ((n * C + c) * H) * W;
                    for (int64_t i = 0; i < H * W; ++i) {
                        sum_g += go[i];
                        sum_gx += static_cast<double>(go[i]) * xh[i];
                    }
                }
                if (need_b) bi->grad[static_cast<size_t>(c)] += static_cast<float>(sum_g);
                if (need_g) gi->grad[static_cast<size_t>(c)] += static_cast<float>(sum_gx);
                if (need_x) {
                    const float g = gi->data[static_cast<size_t>(c)];
                    const float is = (*saved_inv)[static_cast<size_t>(c)];
                    // Batch statistics couple the elements only in training mode.
                    const float mg = training ? static_cast<float>(sum_g / static_cast<double>(cnt)) : 0.0f;
                    const float mgx = training ? static_cast<float>(sum_gx / static_cast<double>(cnt)) : 0.0f;
                    for (int64_t n = 0; n < N; ++n) {
                        const float* go = o.grad.data() + ((n * C + c) * H) * W;
                        const float* xh = saved_xhat->data() + ((n * C + c) * H) * W;
                        float* dx = xi->grad.data() + ((n * C + c) * H) * W;
                        for (int64_t i = 0; i < H * W; ++i) {
                            dx[i] += g * is * (go[i] - mg - xh[i] * mgx);
                        }
                    }
                }
            }
        });
    }
    return y;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (eps <= 0.0f) throw ConfigError("layernorm: eps must be positive");
    const int64_t D = x.dim(-1);
    if (gamma.numel() != D || beta.numel() != D) throw ShapeError("layernorm: gamma/beta length mismatch");
    const int64_t rows = x.numel() / D;
    std::vector<float> out(x.data().size());
    std::vector<float> xhat(x.data().size());
    std::vector<float> inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* p = x.data().data() + r * D;
        double s = 0.0;
        for (int64_t i = 0; i < D; ++i) s += p[i];
        const double m = s / static_cast<double>(D);
        double v = 0.0;
        for (int64_t i = 0; i < D; ++i) {
            const double d = p[i] - m;
            v += d * d;
        }
        const float is = 1.0f / std::sqrt(static_cast<float>(v / static_cast<double>(D)) + eps);
        inv_std[static_cast<size_t>(r)] = is;
        float* q = out.data() + r * D;
        float* xh = xhat.data() + r * D;
        for (int64_t i = 0; i < D; ++i) {
            xh[i] = (p[i] - static_cast<float>(m)) * is;
            q[i] = gamma.data()[static_cast<size_t>(i)] * xh[i] + beta.data()[static_cast<size_t>(i)];
        }
    }
    Tensor y(x.shape(), std::move(out));
    if (grad_enabled({&x, &gamma, &beta})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        const bool need_x = x.requires_grad();
        const bool need_g = gamma.requires_grad();
        const bool need_b = beta.requires_grad();
        auto saved_xhat = std::make_shared<std::vector<float>>(std::move(xhat));
        auto saved_inv = std::make_shared<std::vector<float>>(std::move(inv_std));
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            if (need_g) gi->ensure_grad();
            if (need_b) bi->ensure_grad();
            if (need_x) xi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const float* go = o.grad.data() + r * D;
                const float* xh = saved_xhat->data() + r * D;
                double sum_g = 0.0, sum_gx = 0.0;
                for (int64_t i = 0; i < D; ++i) {
                    const double gg = static_cast<double>(go[i]) * gi->data[static_cast<size_t>(i)];
                    sum_g += gg;
                    sum_gx += gg * xh[i];
                    if (need_g) gi->grad[static_cast<size_t>(i)] += go[i] * xh[i];
                    if (need_b) bi->grad[static_cast<size_t>(i)] += go[i];
                }
                if (need_x) {
                    const float is = (*saved_inv)[static_cast<size_t>(r)];
                    const float mg = static_cast<float>(sum_g / static_cast<double>(D));
                    const float mgx = static_cast<float>(sum_gx / static_cast<double>(D));
                    float* dx = xi->grad.data() + r * D;
                    for (int64_t i = 0; i < D; ++i) {
                        const float gg = go[i] * gi->data[static_cast<size_t>(i)];
                        dx[i] += is * (gg - mg - xh[i] * mgx);
                    }
                }
            }
        });
    }
    return y;
}

// ---- softmax --------------------------------------------------------------

namespace {

struct AxisView {
    int64_t outer, axis, inner;
};

AxisView axis_view(const Tensor& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of bounds");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    return {outer, x.dim(axis), inner};
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    const AxisView v = axis_view(x, axis);
    std::vector<float> out(x.data().size());
    const float* p = x.data().data();
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t i = 0; i < v.inner; ++i) {
            const int64_t base = o * v.axis * v.inner + i;
            float mx = -std::numeric_limits<float>::infinity();
            for (int64_t a = 0; a < v.axis; ++a) mx = std::max(mx, p[base + a * v.inner]);
            double sum = 0.0;
            for (int64_t a = 0; a < v.axis; ++a) {
                const float e = std::exp(p[base + a * v.inner] - mx);
                out[static_cast<size_t>(base + a * v.inner)] = e;
                sum += e;
            }
            const float inv = static_cast<float>(1.0 / sum);
            for (int64_t a = 0; a < v.axis; ++a) out[static_cast<size_t>(base + a * v.inner)] *= inv;
        }
    }
    Tensor y(x.shape(), std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            xi->ensure_grad();
            for (int64_t ot = 0; ot < v.outer; ++ot) {
                for (int64_t i = 0; i < v.inner; ++i) {
                    const int64_t base = ot * v.axis * v.inner + i;
                    double dot = 0.0;
                    for (int64_t a = 0; a < v.axis; ++a) {
                        const int64_t idx = base + a * v.inner;
                        dot += static_cast<double>(o.grad[static_cast<size_t>(idx)]) * o.data[static_cast<size_t>(idx)];
                    }
                    for (int64_t a = 0; a < v.axis; ++a) {
                        const int64_t idx = base + a * v.inner;
                        xi->grad[static_cast<size_t>(idx)] +=
                            o.data[static_cast<size_t>(idx)] *
                            (o.grad[static_cast<size_t>(idx)] - static_cast<float>(dot));
                    }
                }
            }
        });
    }
    return y;
}

Tensor log_softmax(const Tensor& x, int axis) {
    const AxisView v = axis_view(x, axis);
    std::vector<float> out(x.data().size());
    const float* p = x.data().data();
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t i = 0; i < v.inner; ++i) {
            const int64_t base = o * v.axis * v.inner + i;
            float mx = -std::numeric_limits<float>::infinity();
            for (int64_t a = 0; a < v.axis; ++a) mx = std::max(mx, p[base + a * v.inner]);
            double sum = 0.0;
            for (int64_t a = 0; a < v.axis; ++a) sum += std::exp(p[base + a * v.inner] - mx);
            const float lse = mx + static_cast<float>(std::log(sum));
            for (int64_t a = 0; a < v.axis; ++a) {
                out[static_cast<size_t>(base + a * v.inner)] = p[base + a * v.inner] - lse;
            }
        }
    }
    Tensor y(x.shape(), std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            xi->ensure_grad();
            for (int64_t ot = 0; ot < v.outer; ++ot) {
                for (int64_t i = 0; i < v.inner; ++i) {
                    const int64_t base = ot * v.axis * v.inner + i;
                    double gsum = 0.0;
                    for (int64_t a = 0; a < v.axis; ++a) gsum += o.grad[static_cast<size_t>(base + a * v.inner)];
                    for (int64_t a = 0; a < v.axis; ++a) {
                        const int64_t idx = base + a * v.inner;
                        xi->grad[static_cast<size_t>(idx)] +=
                            o.grad[static_cast<size_t>(idx)] -
                            std::exp(o.data[static_cast<size_t>(idx)]) * static_cast<float>(gsum);
                    }
                }
            }
        });
    }
    return y;
}

// ---- layout ops -----------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    check_shape_positive(new_shape);
    if (numel_of(new_shape) != x.numel()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    }
    Tensor y(new_shape, x.data());
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [xi](TensorImpl& o) { accumulate(*xi, o.grad); });
    }
    return y;
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
    const int r = x.rank();
    if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int o = order[static_cast<size_t>(i)];
        if (o < 0 || o >= r || seen[static_cast<size_t>(o)]) throw ShapeError("permute: invalid order");
        seen[static_cast<size_t>(o)] = true;
        out_shape[static_cast<size_t>(i)] = x.dim(o);
    }
    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1), out_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.dim(i + 1);
        out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
    }
    const int64_t n = x.numel();
    std::vector<float> out(static_cast<size_t>(n));
    auto map_index = [in_strides, out_strides, order, r](int64_t oi) {
        int64_t ii = 0, rem = oi;
        for (int d = 0; d < r; ++d) {
            const int64_t idx = rem / out_strides[static_cast<size_t>(d)];
            rem %= out_strides[static_cast<size_t>(d)];
            ii += idx * in_strides[static_cast<size_t>(order[static_cast<size_t>(d)])];
        }
        return ii;
    };
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = x.data()[static_cast<size_t>(map_index(i))];
    Tensor y(out_shape, std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [xi, map_index, n](TensorImpl& o) {
            xi->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                xi->grad[static_cast<size_t>(map_index(i))] += o.grad[static_cast<size_t>(i)];
            }
        });
    }
    return y;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int r = parts[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of bounds");
    Shape out_shape = parts[0].shape();
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < r; ++d) {
            if (d != axis && p.dim(d) != out_shape[static_cast<size_t>(d)]) {
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
            }
        }
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total_axis;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<size_t>(d)];

    std::vector<float> out(static_cast<size_t>(numel_of(out_shape)));
    int64_t axis_off = 0;
    for (const auto& p : parts) {
        const int64_t pa = p.dim(axis);
        for (int64_t o = 0; o < outer; ++o) {
            const float* src = p.data().data() + o * pa * inner;
            float* dst = out.data() + (o * total_axis + axis_off) * inner;
            std::memcpy(dst, src, static_cast<size_t>(pa * inner) * sizeof(float));
        }
        axis_off += pa;
    }
    Tensor y(out_shape, std::move(out));
    bool any_grad = false;
    for (const auto& p : parts) any_grad |= p.requires_grad();
    if (Tape::active() && any_grad) {
        y.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        std::vector<int64_t> axis_sizes;
        std::vector<bool> needs;
        for (const auto& p : parts) {
            impls.push_back(p.impl());
            axis_sizes.push_back(p.dim(axis));
            needs.push_back(p.requires_grad());
        }
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            int64_t off = 0;
            for (size_t pi = 0; pi < impls.size(); ++pi) {
                const int64_t pa = axis_sizes[pi];
                if (needs[pi]) {
                    impls[pi]->ensure_grad();
                    for (int64_t ot = 0; ot < outer; ++ot) {
                        const float* src = o.grad.data() + (ot * total_axis + off) * inner;
                        float* dst = impls[pi]->grad.data() + ot * pa * inner;
                        for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                off += pa;
            }
        });
    }
    return y;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of bounds");
    if (start < 0 || len <= 0 || start + len > x.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of bounds for axis size " + std::to_string(x.dim(axis)));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    const int64_t ax = x.dim(axis);
    std::vector<float> out(static_cast<size_t>(outer * len * inner));
    for (int64_t o = 0; o < outer; ++o) {
        const float* src = x.data().data() + (o * ax + start) * inner;
        std::memcpy(out.data() + o * len * inner, src, static_cast<size_t>(len * inner) * sizeof(float));
    }
    Tensor y(out_shape, std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            xi->ensure_grad();
            for (int64_t ot = 0; ot < outer; ++ot) {
                const float* src = o.grad.data() + ot * len * inner;
                float* dst = xi->grad.data() + (ot * ax + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return y;
}

// ---- resampling -----------------------------------------------------------

namespace {

// align_corners=false source coordinate for a destination index.
inline float src_coord(int64_t dst, int64_t in_size, int64_t out_size) {
    return (static_cast<float>(dst) + 0.5f) * static_cast<float>(in_size) / static_cast<float>(out_size) - 0.5f;
}

struct LerpWeights {
    int64_t lo;
    float w_hi;  // weight of lo+1; lo gets 1-w_hi
};

inline LerpWeights lerp_at(float coord, int64_t size) {
    float c = std::min(std::max(coord, 0.0f), static_cast<float>(size - 1));
    int64_t lo = static_cast<int64_t>(std::floor(c));
    if (lo > size - 2) lo = std::max<int64_t>(0, size - 2);
    const float w = (size == 1) ? 0.0f : c - static_cast<float>(lo);
    return {lo, w};
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
    if (x.rank() != 4) throw ShapeError("upsample_bilinear expects NCHW, got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear: bad output size");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<LerpWeights> wh(static_cast<size_t>(out_h)), ww(static_cast<size_t>(out_w));
    for (int64_t i = 0; i < out_h; ++i) wh[static_cast<size_t>(i)] = lerp_at(src_coord(i, H, out_h), H);
    for (int64_t j = 0; j < out_w; ++j) ww[static_cast<size_t>(j)] = lerp_at(src_coord(j, W, out_w), W);

    std::vector<float> out(static_cast<size_t>(N * C * out_h * out_w));
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const float* src = x.data().data() + nc * H * W;
        float* dst = out.data() + nc * out_h * out_w;
        for (int64_t i = 0; i < out_h; ++i) {
            const auto [r0, wr] = wh[static_cast<size_t>(i)];
            const int64_t r1 = std::min(r0 + 1, H - 1);
            for (int64_t j = 0; j < out_w; ++j) {
                const auto [c0, wc] = ww[static_cast<size_t>(j)];
                const int64_t c1 = std::min(c0 + 1, W - 1);
                dst[i * out_w + j] = (1 - wr) * (1 - wc) * src[r0 * W + c0] +
                                     (1 - wr) * wc * src[r0 * W + c1] +
                                     wr * (1 - wc) * src[r1 * W + c0] + wr * wc * src[r1 * W + c1];
            }
        }
    }
    Tensor y({N, C, out_h, out_w}, std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            xi->ensure_grad();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const float* go = o.grad.data() + nc * out_h * out_w;
                float* dx = xi->grad.data() + nc * H * W;
                for (int64_t i = 0; i < out_h; ++i) {
                    const auto [r0, wr] = wh[static_cast<size_t>(i)];
                    const int64_t r1 = std::min(r0 + 1, H - 1);
                    for (int64_t j = 0; j < out_w; ++j) {
                        const auto [c0, wc] = ww[static_cast<size_t>(j)];
                        const int64_t c1 = std::min(c0 + 1, W - 1);
                        const float g = go[i * out_w + j];
                        dx[r0 * W + c0] += (1 - wr) * (1 - wc) * g;
                        dx[r0 * W + c1] += (1 - wr) * wc * g;
                        dx[r1 * W + c0] += wr * (1 - wc) * g;
                        dx[r1 * W + c1] += wr * wc * g;
                    }
                }
            }
        });
    }
    return y;
}

Tensor scatter_add_rows(const Tensor& values, const std::vector<int64_t>& index, int64_t out_rows) {
    if (values.rank() != 1 && values.rank() != 2) {
        throw ShapeError("scatter_add_rows expects rank 1 or 2 values, got " + shape_str(values.shape()));
    }
    const int64_t n = values.dim(0);
    const int64_t cols = values.rank() == 2 ? values.dim(1) : 1;
    if (static_cast<int64_t>(index.size()) != n) throw ShapeError("scatter_add_rows: index length mismatch");
    for (int64_t i = 0; i < n; ++i) {
        if (index[static_cast<size_t>(i)] < 0 || index[static_cast<size_t>(i)] >= out_rows) {
            throw IndexError("scatter_add_rows: index " + std::to_string(index[static_cast<size_t>(i)]) +
                             " at position " + std::to_string(i) + " outside [0," +
                             std::to_string(out_rows) + ")");
        }
    }
    Shape out_shape = values.rank() == 2 ? Shape{out_rows, cols} : Shape{out_rows};
    std::vector<float> out(static_cast<size_t>(out_rows * cols), 0.0f);
    for (int64_t i = 0; i < n; ++i) {
        const float* src = values.data().data() + i * cols;
        float* dst = out.data() + index[static_cast<size_t>(i)] * cols;
        for (int64_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
    Tensor y(out_shape, std::move(out));
    if (grad_enabled({&values})) {
        y.set_requires_grad(true);
        auto vi = values.impl();
        auto idx = std::make_shared<std::vector<int64_t>>(index);
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            vi->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const float* src = o.grad.data() + (*idx)[static_cast<size_t>(i)] * cols;
                float* dst = vi->grad.data() + i * cols;
                for (int64_t c = 0; c < cols; ++c) dst[c] += src[c];
            }
        });
    }
    return y;
}

Tensor bilinear_sample(const Tensor& map, const std::vector<float>& rows,
                       const std::vector<float>& cols, int64_t out_h, int64_t out_w) {
    if (map.rank() != 3) throw ShapeError("bilinear_sample expects CHW map, got " + shape_str(map.shape()));
    const int64_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
    const int64_t n = out_h * out_w;
    if (static_cast<int64_t>(rows.size()) != n || static_cast<int64_t>(cols.size()) != n) {
        throw ShapeError("bilinear_sample: coordinate count mismatch");
    }
    // Precompute corner indices and weights; taps outside the grid read zero.
    struct Tap {
        int64_t i00, i01, i10, i11;
        float w00, w01, w10, w11;
    };
    std::vector<Tap> taps(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const float r = rows[static_cast<size_t>(i)];
        const float c = cols[static_cast<size_t>(i)];
        const int64_t r0 = static_cast<int64_t>(std::floor(r));
        const int64_t c0 = static_cast<int64_t>(std::floor(c));
        const float fr = r - static_cast<float>(r0);
        const float fc = c - static_cast<float>(c0);
        auto at = [&](int64_t rr, int64_t cc) -> int64_t {
            return (rr >= 0 && rr < H && cc >= 0 && cc < W) ? rr * W + cc : -1;
        };
        taps[static_cast<size_t>(i)] = {at(r0, c0),     at(r0, c0 + 1), at(r0 + 1, c0), at(r0 + 1, c0 + 1),
                                        (1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
    }
    std::vector<float> out(static_cast<size_t>(C * n), 0.0f);
    for (int64_t ch = 0; ch < C; ++ch) {
        const float* src = map.data().data() + ch * H * W;
        float* dst = out.data() + ch * n;
        for (int64_t i = 0; i < n; ++i) {
            const Tap& t = taps[static_cast<size_t>(i)];
            float v = 0.0f;
            if (t.i00 >= 0) v += t.w00 * src[t.i00];
            if (t.i01 >= 0) v += t.w01 * src[t.i01];
            if (t.i10 >= 0) v += t.w10 * src[t.i10];
            if (t.i11 >= 0) v += t.w11 * src[t.i11];
            dst[i] = v;
        }
    }
    Tensor y({C, out_h, out_w}, std::move(out));
    if (grad_enabled({&map})) {
        y.set_requires_grad(true);
        auto mi = map.impl();
        auto saved = std::make_shared<std::vector<Tap>>(std::move(taps));
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            mi->ensure_grad();
            for (int64_t ch = 0; ch < C; ++ch) {
                const float* go = o.grad.data() + ch * n;
                float* dm = mi->grad.data() + ch * H * W;
                for (int64_t i = 0; i < n; ++i) {
                    const Tap& t = (*saved)[static_cast<size_t>(i)];
                    const float g = go[i];
                    if (t.i00 >= 0) dm[t.i00] += t.w00 * g;
                    if (t.i01 >= 0) dm[t.i01] += t.w01 * g;
                    if (t.i10 >= 0) dm[t.i10] += t.w10 * g;
                    if (t.i11 >= 0) dm[t.i11] += t.w11 * g;
                }
            }
        });
    }
    return y;
}

// ---- reductions -----------------------------------------------------------

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    const int64_t d = x.dim(-1);
    if (bias.numel() != d) {
        throw ShapeError("add_bias_rows: bias " + shape_str(bias.shape()) + " vs last axis " +
                         std::to_string(d));
    }
    const int64_t rows = x.numel() / d;
    std::vector<float> out(x.data().size());
    for (int64_t r = 0; r < rows; ++r) {
        const float* src = x.data().data() + r * d;
        float* dst = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) dst[j] = src[j] + bias.data()[static_cast<size_t>(j)];
    }
    Tensor y(x.shape(), std::move(out));
    if (grad_enabled({&x, &bias})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto bi = bias.impl();
        const bool need_x = x.requires_grad();
        const bool need_b = bias.requires_grad();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            if (need_x) accumulate(*xi, o.grad);
            if (need_b) {
                bi->ensure_grad();
                for (int64_t r = 0; r < rows; ++r) {
                    const float* go = o.grad.data() + r * d;
                    for (int64_t j = 0; j < d; ++j) bi->grad[static_cast<size_t>(j)] += go[j];
                }
            }
        });
    }
    return y;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    Tensor y = Tensor::scalar(static_cast<float>(s));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [xi](TensorImpl& o) {
            xi->ensure_grad();
            const float g = o.grad[0];
            for (auto& v : xi->grad) v += g;
        });
    }
    return y;
}

Tensor mean_all(const Tensor& x) {
    const float inv = 1.0f / static_cast<float>(x.numel());
    return mul_scalar(sum_all(x), inv);
}

Tensor sum_axis(const Tensor& x, int axis) {
    const AxisView v = axis_view(x, axis);
    if (axis < 0) axis += x.rank();
    Shape out_shape;
    for (int d = 0; d < x.rank(); ++d) {
        if (d != axis) out_shape.push_back(x.dim(d));
    }
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<float> out(static_cast<size_t>(v.outer * v.inner), 0.0f);
    const float* p = x.data().data();
    for (int64_t o = 0; o < v.outer; ++o) {
        for (int64_t a = 0; a < v.axis; ++a) {
            const float* src = p + (o * v.axis + a) * v.inner;
            float* dst = out.data() + o * v.inner;
            for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
        }
    }
    Tensor y(out_shape, std::move(out));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            xi->ensure_grad();
            for (int64_t ot = 0; ot < v.outer; ++ot) {
                for (int64_t a = 0; a < v.axis; ++a) {
                    float* dst = xi->grad.data() + (ot * v.axis + a) * v.inner;
                    const float* src = o.grad.data() + ot * v.inner;
                    for (int64_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return y;
}

Tensor topk_mean(const Tensor& x, int64_t k) {
    if (k < 1 || k > x.numel()) {
        throw ShapeError("topk_mean: k=" + std::to_string(k) + " out of range for " +
                         std::to_string(x.numel()) + " elements");
    }
    std::vector<int64_t> idx(static_cast<size_t>(x.numel()));
    std::iota(idx.begin(), idx.end(), 0);
    std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), [&](int64_t a, int64_t b) {
        const float va = x.data()[static_cast<size_t>(a)], vb = x.data()[static_cast<size_t>(b)];
        if (va != vb) return va > vb;
        return a < b;  // stable tie-break keeps the op deterministic
    });
    idx.resize(static_cast<size_t>(k));
    double s = 0.0;
    for (int64_t i : idx) s += x.data()[static_cast<size_t>(i)];
    Tensor y = Tensor::scalar(static_cast<float>(s / static_cast<double>(k)));
    if (grad_enabled({&x})) {
        y.set_requires_grad(true);
        auto xi = x.impl();
        auto kept = std::make_shared<std::vector<int64_t>>(std::move(idx));
        const float inv = 1.0f / static_cast<float>(k);
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            xi->ensure_grad();
            const float g = o.grad[0] * inv;
            for (int64_t i : *kept) xi->grad[static_cast<size_t>(i)] += g;
        });
    }
    return y;
}

Tensor depth_outer(const Tensor& probs, const Tensor& feat) {
    // probs: (..., D, H, W), feat: (..., C, H, W) with identical leading dims.
    if (probs.rank() != 3 || feat.rank() != 3) {
        throw ShapeError("depth_outer expects rank-3 (D,H,W) and (C,H,W) tensors");
    }
    const int64_t D = probs.dim(0), H = probs.dim(1), W = probs.dim(2);
    const int64_t C = feat.dim(0);
    if (feat.dim(1) != H || feat.dim(2) != W) {
        throw ShapeError("depth_outer spatial mismatch: " + shape_str(probs.shape()) + " vs " +
                         shape_str(feat.shape()));
    }
    const int64_t hw = H * W;
    std::vector<float> out(static_cast<size_t>(D * C * hw));
    for (int64_t d = 0; d < D; ++d) {
        const float* pd = probs.data().data() + d * hw;
        for (int64_t c = 0; c < C; ++c) {
            const float* pf = feat.data().data() + c * hw;
            float* po = out.data() + (d * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) po[i] = pd[i] * pf[i];
        }
    }
    Tensor y({D, C, H, W}, std::move(out));
    if (grad_enabled({&probs, &feat})) {
        y.set_requires_grad(true);
        auto pi = probs.impl();
        auto fi = feat.impl();
        const bool need_p = probs.requires_grad();
        const bool need_f = feat.requires_grad();
        Tape::active()->record(y.impl(), [=](TensorImpl& o) {
            if (need_p) pi->ensure_grad();
            if (need_f) fi->ensure_grad();
            for (int64_t d = 0; d < D; ++d) {
                for (int64_t c = 0; c < C; ++c) {
                    const float* go = o.grad.data() + (d * C + c) * hw;
                    if (need_p) {
                        const float* pf = fi->data.data() + c * hw;
                        float* dp = pi->grad.data() + d * hw;
                        for (int64_t i = 0; i < hw; ++i) dp[i] += go[i] * pf[i];
                    }
                    if (need_f) {
                        const float* pd = pi->data.data() + d * hw;
                        float* df = fi->grad.data() + c * hw;
                        for (int64_t i = 0; i < hw; ++i) df[i] += go[i] * pd[i];
                    }
                }
            }
        });
    }
    return y;
}

}  // namespace bevflow
