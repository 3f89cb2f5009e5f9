#include "sdit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace sdit {

namespace {

thread_local bool g_grad_enabled = true;

TensorImplPtr make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (shape_numel(impl->shape) != impl->numel()) {
        throw ShapeError("tensor data length does not match shape");
    }
    return impl;
}

bool should_record(std::initializer_list<Tensor> parents) {
    if (!g_grad_enabled) return false;
    for (const auto& p : parents) {
        if (p.requires_grad()) return true;
    }
    return false;
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::initializer_list<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
    auto impl = make_impl(std::move(shape), std::move(data));
    impl->op = op;
    if (should_record(parents)) {
        impl->requires_grad = true;
        for (const auto& p : parents) impl->parents.push_back(p.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch");
    }
}

double stable_softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("shape dimensions must be positive");
        n *= d;
    }
    return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(const Shape& shape) {
    return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), 0.0)));
}

Tensor Tensor::full(const Shape& shape, double value) {
    return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), value)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
        throw ShapeError("Tensor::from: value count does not match shape");
    }
    return Tensor(make_impl(shape, std::move(values)));
}

Tensor Tensor::scalar(double value) { return Tensor::from({1}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
    std::vector<double> values(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : values) v = rng.normal(0.0, stddev);
    return Tensor(make_impl(shape, std::move(values)));
}

int Tensor::rows() const {
    const auto& s = shape();
    if (s.empty()) throw ShapeError("rows() on empty shape");
    int64_t r = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
    return static_cast<int>(r);
}

int Tensor::cols() const {
    const auto& s = shape();
    if (s.empty()) throw ShapeError("cols() on empty shape");
    return s.back();
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() requires a scalar tensor");
    return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) {
        throw Error("grad accessed before backward populated it");
    }
    return impl_->grad;
}

Tensor Tensor::clone() const {
    return Tensor(make_impl(impl_->shape, impl_->data));
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss");
    }
    // Topological order by iterative DFS.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImplPtr node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl(), 0});
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImplPtr p = f.node->parents[f.next_parent++];
            if (!visited.count(p.get())) {
                visited.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node.get());
            stack.pop_back();
        }
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
        }
    }
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return make_result(a.shape(), std::move(out), "add", {a, b},
                       [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
                           }
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    return make_result(a.shape(), std::move(out), "sub", {a, b},
                       [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
                           }
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    return make_result(a.shape(), std::move(out), "mul", {a, b},
                       [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) {
                                   ai->grad[i] += self.grad[i] * bi->data[i];
                               }
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) {
                                   bi->grad[i] += self.grad[i] * ai->data[i];
                               }
                           }
                       });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), "scale", {a},
                       [ai = a.impl(), s](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += s * self.grad[i];
                       });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (auto& v : out) v += s;
    return make_result(a.shape(), std::move(out), "add_scalar", {a},
                       [ai = a.impl()](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
                       });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2) {
        throw ShapeError("matmul requires 2D tensors");
    }
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = ad[static_cast<size_t>(i) * k + p];
            if (av == 0.0) continue;
            const double* brow = &bd[static_cast<size_t>(p) * n];
            double* orow = &out[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), "matmul", {a, b},
                       [ai = a.impl(), bi = b.impl(), m, k, n](TensorImpl& self) {
                           // dA = dOut * B^T ; dB = A^T * dOut
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (int i = 0; i < m; ++i) {
                                   for (int p = 0; p < k; ++p) {
                                       double acc = 0.0;
                                       const double* grow = &self.grad[static_cast<size_t>(i) * n];
                                       const double* brow = &bi->data[static_cast<size_t>(p) * n];
                                       for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                       ai->grad[static_cast<size_t>(i) * k + p] += acc;
                                   }
                               }
                           }
                           if (bi->requires_grad) {
                               bi->ensure_grad();
                               for (int p = 0; p < k; ++p) {
                                   for (int i = 0; i < m; ++i) {
                                       const double av = ai->data[static_cast<size_t>(i) * k + p];
                                       if (av == 0.0) continue;
                                       const double* grow = &self.grad[static_cast<size_t>(i) * n];
                                       double* brow = &bi->grad[static_cast<size_t>(p) * n];
                                       for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                                   }
                               }
                           }
                       });
}

Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("transpose requires a 2D tensor");
    const int r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(static_cast<size_t>(r) * c);
    const auto& ad = a.data();
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
            out[static_cast<size_t>(j) * r + i] = ad[static_cast<size_t>(i) * c + j];
        }
    }
    return make_result({c, r}, std::move(out), "transpose", {a},
                       [ai = a.impl(), r, c](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (int i = 0; i < r; ++i) {
                               for (int j = 0; j < c; ++j) {
                                   ai->grad[static_cast<size_t>(i) * c + j] +=
                                       self.grad[static_cast<size_t>(j) * r + i];
                               }
                           }
                       });
}

Tensor slice_rows(const Tensor& a, int start, int count) {
    const int r = a.rows(), c = a.cols();
    if (start < 0 || count <= 0 || start + count > r) {
        throw ShapeError("slice_rows: range out of bounds");
    }
    std::vector<double> out(static_cast<size_t>(count) * c);
    std::copy(a.data().begin() + static_cast<size_t>(start) * c,
              a.data().begin() + static_cast<size_t>(start + count) * c, out.begin());
    return make_result({count, c}, std::move(out), "slice_rows", {a},
                       [ai = a.impl(), start, c](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               ai->grad[static_cast<size_t>(start) * c + i] += self.grad[i];
                           }
                       });
}

Tensor slice_cols(const Tensor& a, int start, int count) {
    const int r = a.rows(), c = a.cols();
    if (start < 0 || count <= 0 || start + count > c) {
        throw ShapeError("slice_cols: range out of bounds");
    }
    std::vector<double> out(static_cast<size_t>(r) * count);
    const auto& ad = a.data();
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < count; ++j) {
            out[static_cast<size_t>(i) * count + j] = ad[static_cast<size_t>(i) * c + start + j];
        }
    }
    return make_result({r, count}, std::move(out), "slice_cols", {a},
                       [ai = a.impl(), r, c, start, count](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (int i = 0; i < r; ++i) {
                               for (int j = 0; j < count; ++j) {
                                   ai->grad[static_cast<size_t>(i) * c + start + j] +=
                                       self.grad[static_cast<size_t>(i) * count + j];
                               }
                           }
                       });
}

namespace {

Tensor concat_impl(const std::vector<Tensor>& parts, bool by_rows) {
    if (parts.empty()) throw ShapeError("concat: empty part list");
    const int c0 = by_rows ? parts[0].cols() : parts[0].rows();
    int total = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        if ((by_rows ? p.cols() : p.rows()) != c0) {
            throw ShapeError("concat: incompatible part shapes");
        }
        total += by_rows ? p.rows() : p.cols();
        any_grad = any_grad || p.requires_grad();
    }
    Shape shape = by_rows ? Shape{total, c0} : Shape{c0, total};
    std::vector<double> out(static_cast<size_t>(total) * c0);
    if (by_rows) {
        size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.data().begin(), p.data().end(), out.begin() + off);
            off += p.data().size();
        }
    } else {
        int col_off = 0;
        for (const auto& p : parts) {
            const int pc = p.cols();
            for (int i = 0; i < c0; ++i) {
                for (int j = 0; j < pc; ++j) {
                    out[static_cast<size_t>(i) * total + col_off + j] =
                        p.data()[static_cast<size_t>(i) * pc + j];
                }
            }
            col_off += pc;
        }
    }
    auto impl = make_impl(std::move(shape), std::move(out));
    impl->op = by_rows ? "concat_rows" : "concat_cols";
    if (g_grad_enabled && any_grad) {
        impl->requires_grad = true;
        std::vector<TensorImplPtr> parents;
        parents.reserve(parts.size());
        for (const auto& p : parts) parents.push_back(p.impl());
        impl->parents = parents;
        impl->backward_fn = [parents, by_rows, c0, total](TensorImpl& self) {
            if (by_rows) {
                size_t off = 0;
                for (const auto& p : parents) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
                    }
                    off += p->data.size();
                }
            } else {
                int col_off = 0;
                for (const auto& p : parents) {
                    const int pc = p->shape[1];
                    if (p->requires_grad) {
                        p->ensure_grad();
                        for (int i = 0; i < c0; ++i) {
                            for (int j = 0; j < pc; ++j) {
                                p->grad[static_cast<size_t>(i) * pc + j] +=
                                    self.grad[static_cast<size_t>(i) * total + col_off + j];
                            }
                        }
                    }
                    col_off += pc;
                }
            }
        };
    }
    return Tensor(impl);
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) { return concat_impl(parts, true); }
Tensor concat_cols(const std::vector<Tensor>& parts) { return concat_impl(parts, false); }

Tensor repeat_rows(const Tensor& a, int times) {
    if (times <= 0) throw ShapeError("repeat_rows: times must be positive");
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r) * times * c);
    const auto& ad = a.data();
    for (int i = 0; i < r; ++i) {
        for (int t = 0; t < times; ++t) {
            std::copy(ad.begin() + static_cast<size_t>(i) * c,
                      ad.begin() + static_cast<size_t>(i + 1) * c,
                      out.begin() + (static_cast<size_t>(i) * times + t) * c);
        }
    }
    return make_result({r * times, c}, std::move(out), "repeat_rows", {a},
                       [ai = a.impl(), r, c, times](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (int i = 0; i < r; ++i) {
                               for (int t = 0; t < times; ++t) {
                                   for (int j = 0; j < c; ++j) {
                                       ai->grad[static_cast<size_t>(i) * c + j] +=
                                           self.grad[(static_cast<size_t>(i) * times + t) * c + j];
                                   }
                               }
                           }
                       });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    const int r = a.rows(), c = a.cols();
    if (v.numel() != c) throw ShapeError("add_rowvec: vector length must equal columns");
    std::vector<double> out(a.data());
    const auto& vd = v.data();
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += vd[j];
    }
    return make_result(a.shape(), std::move(out), "add_rowvec", {a, v},
                       [ai = a.impl(), vi = v.impl(), r, c](TensorImpl& self) {
                           if (ai->requires_grad) {
                               ai->ensure_grad();
                               for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
                           }
                           if (vi->requires_grad) {
                               vi->ensure_grad();
                               for (int i = 0; i < r; ++i) {
                                   for (int j = 0; j < c; ++j) {
                                       vi->grad[j] += self.grad[static_cast<size_t>(i) * c + j];
                                   }
                               }
                           }
                       });
}

Tensor softmax_rows(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(a.data());
    for (int i = 0; i < r; ++i) {
        double* row = &out[static_cast<size_t>(i) * c];
        const double mx = *std::max_element(row, row + c);
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            denom += row[j];
        }
        for (int j = 0; j < c; ++j) row[j] /= denom;
    }
    return make_result(a.shape(), std::move(out), "softmax", {a},
                       [ai = a.impl(), r, c](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (int i = 0; i < r; ++i) {
                               const double* y = &self.data[static_cast<size_t>(i) * c];
                               const double* gy = &self.grad[static_cast<size_t>(i) * c];
                               double dot = 0.0;
                               for (int j = 0; j < c; ++j) dot += y[j] * gy[j];
                               double* gx = &ai->grad[static_cast<size_t>(i) * c];
                               for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
                           }
                       });
}

Tensor silu(const Tensor& a) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= sigmoid(v);
    return make_result(a.shape(), std::move(out), "silu", {a},
                       [ai = a.impl()](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               const double x = ai->data[i];
                               const double s = sigmoid(x);
                               ai->grad[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
                           }
                       });
}

Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    std::vector<double> out(a.data());
    for (auto& v : out) v *= 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    return make_result(a.shape(), std::move(out), "gelu", {a},
                       [ai = a.impl()](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               const double x = ai->data[i];
                               const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                               const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                               ai->grad[i] += self.grad[i] * (cdf + x * pdf);
                           }
                       });
}

Tensor softplus(const Tensor& a) {
    std::vector<double> out(a.data());
    for (auto& v : out) v = stable_softplus(v);
    return make_result(a.shape(), std::move(out), "softplus", {a},
                       [ai = a.impl()](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               ai->grad[i] += self.grad[i] * sigmoid(ai->data[i]);
                           }
                       });
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain) {
    constexpr double kEps = 1e-12;
    const int r = x.rows(), c = x.cols();
    if (gain.numel() != c) throw ShapeError("rmsnorm: gain length must equal columns");
    std::vector<double> out(static_cast<size_t>(r) * c);
    std::vector<double> rms(r);
    const auto& xd = x.data();
    const auto& gd = gain.data();
    for (int i = 0; i < r; ++i) {
        double ms = 0.0;
        const double* row = &xd[static_cast<size_t>(i) * c];
        for (int j = 0; j < c; ++j) ms += row[j] * row[j];
        rms[i] = std::sqrt(ms / c + kEps);
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] = gd[j] * row[j] / rms[i];
    }
    return make_result(x.shape(), std::move(out), "rmsnorm", {x, gain},
                       [xi = x.impl(), gi = gain.impl(), r, c, rms](TensorImpl& self) {
                           for (int i = 0; i < r; ++i) {
                               const double* xr = &xi->data[static_cast<size_t>(i) * c];
                               const double* gy = &self.grad[static_cast<size_t>(i) * c];
                               const double inv = 1.0 / rms[i];
                               if (gi->requires_grad) {
                                   gi->ensure_grad();
                                   for (int j = 0; j < c; ++j) gi->grad[j] += gy[j] * xr[j] * inv;
                               }
                               if (xi->requires_grad) {
                                   xi->ensure_grad();
                                   double dot = 0.0;  // sum_k gy_k * g_k * x_k
                                   for (int j = 0; j < c; ++j) dot += gy[j] * gi->data[j] * xr[j];
                                   const double coef = dot * inv * inv * inv / c;
                                   double* gx = &xi->grad[static_cast<size_t>(i) * c];
                                   for (int j = 0; j < c; ++j) {
                                       gx[j] += gy[j] * gi->data[j] * inv - coef * xr[j];
                                   }
                               }
                           }
                       });
}

Tensor rope_rows(const Tensor& x, const Tensor& angles) {
    const int r = x.rows(), c = x.cols();
    if (c % 2 != 0) throw ShapeError("rope_rows: columns must be even");
    if (angles.rows() != r || angles.cols() != c / 2) {
        throw ShapeError("rope_rows: angle matrix must be [rows, cols/2]");
    }
    const int h = c / 2;
    std::vector<double> out(static_cast<size_t>(r) * c);
    const auto& xd = x.data();
    const auto& an = angles.data();
    for (int i = 0; i < r; ++i) {
        for (int p = 0; p < h; ++p) {
            const double a = an[static_cast<size_t>(i) * h + p];
            const double cs = std::cos(a), sn = std::sin(a);
            const double x0 = xd[static_cast<size_t>(i) * c + 2 * p];
            const double x1 = xd[static_cast<size_t>(i) * c + 2 * p + 1];
            out[static_cast<size_t>(i) * c + 2 * p] = cs * x0 - sn * x1;
            out[static_cast<size_t>(i) * c + 2 * p + 1] = sn * x0 + cs * x1;
        }
    }
    return make_result(x.shape(), std::move(out), "rope", {x},
                       [xi = x.impl(), ang = angles.impl(), r, c, h](TensorImpl& self) {
                           if (!xi->requires_grad) return;
                           xi->ensure_grad();
                           for (int i = 0; i < r; ++i) {
                               for (int p = 0; p < h; ++p) {
                                   const double a = ang->data[static_cast<size_t>(i) * h + p];
                                   const double cs = std::cos(a), sn = std::sin(a);
                                   const double g0 = self.grad[static_cast<size_t>(i) * c + 2 * p];
                                   const double g1 = self.grad[static_cast<size_t>(i) * c + 2 * p + 1];
                                   xi->grad[static_cast<size_t>(i) * c + 2 * p] += cs * g0 + sn * g1;
                                   xi->grad[static_cast<size_t>(i) * c + 2 * p + 1] += -sn * g0 + cs * g1;
                               }
                           }
                       });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    return make_result({1}, {acc}, "sum", {a},
                       [ai = a.impl()](TensorImpl& self) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (auto& g : ai->grad) g += self.grad[0];
                       });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

Tensor detach(const Tensor& a) {
    return Tensor(make_impl(a.shape(), a.data()));
}

void check_finite(const Tensor& t, const std::string& context) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite value in " + context);
        }
    }
}

}  // namespace sdit
