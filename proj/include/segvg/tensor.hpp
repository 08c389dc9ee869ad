#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace segvg {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Scoped "inference mode": ops executed while a guard is alive record no
/// backward graph. Values are unaffected.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized lazily during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  std::function<void(TensorImpl<T>&)> backward_fn;  // accumulates into parents

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor participating in a reverse-mode autodiff graph.
/// Value-semantic handle; copies share the underlying node.
template <typename T = float>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), {}, true);
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape), {}, true);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel(shape) != values.size())
      throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " holds " +
                                  std::to_string(numel(shape)) + " values, got " +
                                  std::to_string(values.size()));
    return Tensor(std::move(shape), std::move(values), false);
  }

  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  std::size_t size() const { return impl_->data.size(); }

  const std::vector<T>& values() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
  }

  Tensor& set_requires_grad(bool rg = true) {
    impl_->requires_grad = rg;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }

  const std::vector<T>& grad() const {
    const_cast<TensorImpl<T>*>(impl_.get())->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), T(0)); }

  /// Value copy with no graph attachment.
  Tensor detach() const {
    Tensor t(impl_->shape, impl_->data, false);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(impl_->data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(impl_->data[i]);
    return Tensor<U>::from(impl_->shape, std::move(v));
  }

  /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls;
  /// interior gradients are scratch and reset on entry. Each node is visited
  /// exactly once in reverse topological order.
  void backward() const {
    if (!impl_) throw std::invalid_argument("backward: empty tensor");
    if (size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(shape()));

    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> seen;
    struct Frame {
      TensorImpl<T>* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    if (seen.insert(impl_.get()).second) stack.push_back({impl_.get(), 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        TensorImpl<T>* p = f.node->parents[f.next_parent++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    for (TensorImpl<T>* n : order)
      if (n->backward_fn) n->grad.assign(n->data.size(), T(0));
    impl_->ensure_grad();
    impl_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

  // Internal: construct an op result and attach its backward record.
  static Tensor make(Shape shape, std::vector<T> data, const char* op,
                     std::vector<Tensor> parents,
                     std::function<void(TensorImpl<T>&)> backward_fn) {
    Tensor out(std::move(shape), std::move(data), false);
    bool track = detail::grad_mode();
    bool needs = false;
    if (track)
      for (const Tensor& p : parents)
        if (p.impl_->requires_grad) needs = true;
    if (needs) {
      out.impl_->requires_grad = true;
      out.impl_->op = op;
      out.impl_->parents.reserve(parents.size());
      for (Tensor& p : parents) out.impl_->parents.push_back(p.impl_);
      out.impl_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  Tensor(Shape shape, std::vector<T> data, bool fill_zero) : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->shape = std::move(shape);
    if (fill_zero)
      impl_->data.assign(numel(impl_->shape), T(0));
    else
      impl_->data = std::move(data);
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// matmul kernels (row-major). These carry nearly all the training cost.
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,k] += A[m,n] * B^T, B stored [k,n]
template <typename T>
void mm_abt_acc(const T* a, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * n;
    T* ci = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* bp = b + static_cast<std::size_t>(p) * n;
      T acc = 0;
      for (int j = 0; j < n; ++j) acc += ai[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// C[k,n] += A^T * B, A stored [m,k], B stored [m,n]
template <typename T>
void mm_atb_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * k;
    const T* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = ai[p];
      T* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <typename T>
void accumulate(TensorImpl<T>& dst, const std::vector<T>& delta) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) dst.grad[i] += delta[i];
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2 || sa.size() != sb.size() || sa.size() > 3) fail();
  int batch = 1;
  if (sa.size() == 3) {
    if (sa[0] != sb[0]) fail();
    batch = sa[0];
  }
  int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  int k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2) fail();

  Shape out_shape = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(numel(out_shape), T(0));
  const std::size_t a_step = static_cast<std::size_t>(m) * k;
  const std::size_t b_step = static_cast<std::size_t>(k) * n;
  const std::size_t c_step = static_cast<std::size_t>(m) * n;
  for (int bi = 0; bi < batch; ++bi)
    detail::mm_acc(a.values().data() + bi * a_step, b.values().data() + bi * b_step,
                   out.data() + bi * c_step, m, k, n);

  auto ai = a.impl();
  auto bi_ = b.impl();
  return Tensor<T>::make(
      out_shape, std::move(out), "matmul", {a, b},
      [ai, bi_, batch, m, k, n, a_step, b_step, c_step](TensorImpl<T>& o) {
        if (ai->requires_grad) {
          ai->ensure_grad();
          for (int bi2 = 0; bi2 < batch; ++bi2)
            detail::mm_abt_acc(o.grad.data() + bi2 * c_step, bi_->data.data() + bi2 * b_step,
                               ai->grad.data() + bi2 * a_step, m, n, k);
        }
        if (bi_->requires_grad) {
          bi_->ensure_grad();
          for (int bi2 = 0; bi2 < batch; ++bi2)
            detail::mm_atb_acc(ai->data.data() + bi2 * a_step, o.grad.data() + bi2 * c_step,
                               bi_->grad.data() + bi2 * b_step, m, k, n);
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_or_scalar(const Shape& a, const Shape& b, const char* op) {
  if (a != b && numel(a) != 1 && numel(b) != 1)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

/// a + b, same shape or either side scalar.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_or_scalar<T>(a.shape(), b.shape(), "add");
  bool as = a.size() == 1 && b.size() != 1;
  bool bs = b.size() == 1 && a.size() != 1;
  const Shape& shape = bs || !as ? a.shape() : b.shape();
  std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[as ? 0 : i] + bv[bs ? 0 : i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor<T>::make(shape, std::move(out), "add", {a, b}, [ai, bi, as, bs, n](TensorImpl<T>& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (as)
        for (std::size_t i = 0; i < n; ++i) ai->grad[0] += o.grad[i];
      else
        for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (bs)
        for (std::size_t i = 0; i < n; ++i) bi->grad[0] += o.grad[i];
      else
        for (std::size_t i = 0; i < n; ++i) bi->grad[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_or_scalar<T>(a.shape(), b.shape(), "sub");
  bool as = a.size() == 1 && b.size() != 1;
  bool bs = b.size() == 1 && a.size() != 1;
  const Shape& shape = bs || !as ? a.shape() : b.shape();
  std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[as ? 0 : i] - bv[bs ? 0 : i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor<T>::make(shape, std::move(out), "sub", {a, b}, [ai, bi, as, bs, n](TensorImpl<T>& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (as)
        for (std::size_t i = 0; i < n; ++i) ai->grad[0] += o.grad[i];
      else
        for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (bs)
        for (std::size_t i = 0; i < n; ++i) bi->grad[0] -= o.grad[i];
      else
        for (std::size_t i = 0; i < n; ++i) bi->grad[i] -= o.grad[i];
    }
  });
}

/// Hadamard product, same shape or either side scalar.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_or_scalar<T>(a.shape(), b.shape(), "mul");
  bool as = a.size() == 1 && b.size() != 1;
  bool bs = b.size() == 1 && a.size() != 1;
  const Shape& shape = bs || !as ? a.shape() : b.shape();
  std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[as ? 0 : i] * bv[bs ? 0 : i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor<T>::make(shape, std::move(out), "mul", {a, b}, [ai, bi, as, bs, n](TensorImpl<T>& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ai->grad[as ? 0 : i] += o.grad[i] * bi->data[bs ? 0 : i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) bi->grad[bs ? 0 : i] += o.grad[i] * ai->data[as ? 0 : i];
    }
  });
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_or_scalar<T>(a.shape(), b.shape(), "divide");
  bool as = a.size() == 1 && b.size() != 1;
  bool bs = b.size() == 1 && a.size() != 1;
  const Shape& shape = bs || !as ? a.shape() : b.shape();
  std::size_t n = numel(shape);
  std::vector<T> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[as ? 0 : i] / bv[bs ? 0 : i];
  auto ai = a.impl(), bi = b.impl();
  return Tensor<T>::make(shape, std::move(out), "divide", {a, b}, [ai, bi, as, bs, n](TensorImpl<T>& o) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ai->grad[as ? 0 : i] += o.grad[i] / bi->data[bs ? 0 : i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T denom = bi->data[bs ? 0 : i];
        bi->grad[bs ? 0 : i] -= o.grad[i] * ai->data[as ? 0 : i] / (denom * denom);
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * c;
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "scale", {a}, [ai, c, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i] * c;
  });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + c;
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "add_const", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T x = a[i];
    out[i] = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  auto ai = a.impl();
  std::vector<T> y = out;
  return Tensor<T>::make(a.shape(), std::move(out), "sigmoid", {a}, [ai, y = std::move(y), n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > 0 ? a[i] : T(0);
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "relu", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      if (ai->data[i] > 0) ai->grad[i] += o.grad[i];
  });
}

/// Exact GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = static_cast<double>(a[i]);
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "gelu", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      double x = static_cast<double>(ai->data[i]);
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ai->grad[i] += o.grad[i] * static_cast<T>(phi + x * pdf);
    }
  });
}

/// Natural log. Non-positive inputs are rejected; clamp first.
template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(a[i] > T(0)))
      throw std::invalid_argument("log: non-positive input " + std::to_string(static_cast<double>(a[i])));
    out[i] = std::log(a[i]);
  }
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "log", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i] / ai->data[i];
  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, a[i]));
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "clamp", {a}, [ai, lo, hi, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      if (ai->data[i] >= lo && ai->data[i] <= hi) ai->grad[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] < 0 ? -a[i] : a[i];
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "abs", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += ai->data[i] < 0 ? -o.grad[i] : o.grad[i];
  });
}

/// x^e for strictly positive x.
template <typename T>
Tensor<T> pow_const(const Tensor<T>& a, T e) {
  std::size_t n = a.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(a[i] > T(0)))
      throw std::invalid_argument("pow_const: non-positive base " + std::to_string(static_cast<double>(a[i])));
    out[i] = std::pow(a[i], e);
  }
  auto ai = a.impl();
  return Tensor<T>::make(a.shape(), std::move(out), "pow_const", {a}, [ai, e, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      ai->grad[i] += o.grad[i] * e * std::pow(ai->data[i], e - T(1));
  });
}

/// Elementwise min; at ties the gradient routes to the first operand.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_or_scalar<T>(a.shape(), b.shape(), "minimum");
  bool as = a.size() == 1 && b.size() != 1;
  bool bs = b.size() == 1 && a.size() != 1;
  const Shape& shape = bs || !as ? a.shape() : b.shape();
  std::size_t n = numel(shape);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::min(a[as ? 0 : i], b[bs ? 0 : i]);
  auto ai = a.impl(), bi = b.impl();
  return Tensor<T>::make(shape, std::move(out), "minimum", {a, b}, [ai, bi, as, bs, n](TensorImpl<T>& o) {
    for (std::size_t i = 0; i < n; ++i) {
      bool take_a = ai->data[as ? 0 : i] <= bi->data[bs ? 0 : i];
      TensorImpl<T>* tgt = take_a ? ai.get() : bi.get();
      std::size_t idx = take_a ? (as ? 0 : i) : (bs ? 0 : i);
      if (tgt->requires_grad) {
        tgt->ensure_grad();
        tgt->grad[idx] += o.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_or_scalar<T>(a.shape(), b.shape(), "maximum");
  bool as = a.size() == 1 && b.size() != 1;
  bool bs = b.size() == 1 && a.size() != 1;
  const Shape& shape = bs || !as ? a.shape() : b.shape();
  std::size_t n = numel(shape);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(a[as ? 0 : i], b[bs ? 0 : i]);
  auto ai = a.impl(), bi = b.impl();
  return Tensor<T>::make(shape, std::move(out), "maximum", {a, b}, [ai, bi, as, bs, n](TensorImpl<T>& o) {
    for (std::size_t i = 0; i < n; ++i) {
      bool take_a = ai->data[as ? 0 : i] >= bi->data[bs ? 0 : i];
      TensorImpl<T>* tgt = take_a ? ai.get() : bi.get();
      std::size_t idx = take_a ? (as ? 0 : i) : (bs ? 0 : i);
      if (tgt->requires_grad) {
        tgt->ensure_grad();
        tgt->grad[idx] += o.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  auto ai = a.impl();
  std::size_t n = a.size();
  return Tensor<T>::make({1}, {acc}, "sum", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// axis-aware ops
// ---------------------------------------------------------------------------

namespace detail {

inline int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument(std::string(op) + ": axis out of range");
  return axis;
}

inline void axis_extents(const Shape& s, int axis, std::size_t& outer, std::size_t& mid, std::size_t& inner) {
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  mid = static_cast<std::size_t>(s[axis]);
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
}

}  // namespace detail

/// Numerically stabilized softmax along `axis`. Rejects non-finite input.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  int ax = detail::normalize_axis(axis, a.rank(), "softmax");
  std::size_t outer, mid, inner;
  detail::axis_extents(a.shape(), ax, outer, mid, inner);
  std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(a[i])))
      throw std::invalid_argument("softmax: non-finite input");

  std::vector<T> out(n);
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * mid * inner + in;
      T mx = av[base];
      for (std::size_t m = 1; m < mid; ++m) mx = std::max(mx, av[base + m * inner]);
      T denom = 0;
      for (std::size_t m = 0; m < mid; ++m) {
        T e = std::exp(av[base + m * inner] - mx);
        out[base + m * inner] = e;
        denom += e;
      }
      for (std::size_t m = 0; m < mid; ++m) out[base + m * inner] /= denom;
    }
  }

  auto ai = a.impl();
  std::vector<T> y = out;
  return Tensor<T>::make(a.shape(), std::move(out), "softmax", {a},
                         [ai, y = std::move(y), outer, mid, inner](TensorImpl<T>& o) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (std::size_t ou = 0; ou < outer; ++ou) {
                             for (std::size_t in = 0; in < inner; ++in) {
                               std::size_t base = ou * mid * inner + in;
                               T dot = 0;
                               for (std::size_t m = 0; m < mid; ++m)
                                 dot += o.grad[base + m * inner] * y[base + m * inner];
                               for (std::size_t m = 0; m < mid; ++m) {
                                 std::size_t idx = base + m * inner;
                                 ai->grad[idx] += y[idx] * (o.grad[idx] - dot);
                               }
                             }
                           }
                         });
}

/// Per-last-axis normalization to zero mean / unit variance, then affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  int d = x.extent(x.rank() - 1);
  if (gain.size() != static_cast<std::size_t>(d) || bias.size() != static_cast<std::size_t>(d))
    throw std::invalid_argument("layer_norm: gain/bias extent " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " must equal last axis of " + shape_str(x.shape()));
  std::size_t rows = x.size() / static_cast<std::size_t>(d);
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (int i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int i = 0; i < d; ++i) {
      T xh = (row[i] - mu) * is;
      xhat[r * d + i] = xh;
      out[r * d + i] = gv[i] * xh + bv[i];
    }
  }
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
  return Tensor<T>::make(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](TensorImpl<T>& o) {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = o.grad.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (gi->requires_grad) {
            gi->ensure_grad();
            for (int i = 0; i < d; ++i) gi->grad[i] += dy[i] * xh[i];
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            for (int i = 0; i < d; ++i) bi->grad[i] += dy[i];
          }
          if (xi->requires_grad) {
            xi->ensure_grad();
            T mean_dxh = 0, mean_dxh_xh = 0;
            for (int i = 0; i < d; ++i) {
              T dxh = dy[i] * gi->data[i];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh[i];
            }
            mean_dxh /= static_cast<T>(d);
            mean_dxh_xh /= static_cast<T>(d);
            for (int i = 0; i < d; ++i) {
              T dxh = dy[i] * gi->data[i];
              xi->grad[r * d + i] += inv_std[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  int rank = parts[0].rank();
  int ax = detail::normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != ax && p.shape()[i] != out_shape[i])
        throw std::invalid_argument("concat: extent mismatch " + shape_str(p.shape()) + " vs " +
                                    shape_str(out_shape) + " on non-concat axis " + std::to_string(i));
    total += p.shape()[ax];
  }
  out_shape[ax] = total;

  std::size_t outer, mid, inner;
  detail::axis_extents(out_shape, ax, outer, mid, inner);
  (void)mid;
  std::vector<T> out(numel(out_shape));
  std::size_t col = 0;  // running offset along concat axis
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(col);
    std::size_t pm = static_cast<std::size_t>(p.shape()[ax]);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(p.values().begin() + o * pm * inner, p.values().begin() + (o + 1) * pm * inner,
                out.begin() + (o * static_cast<std::size_t>(total) + col) * inner);
    col += pm;
  }

  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  std::vector<std::size_t> part_mid;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    part_mid.push_back(static_cast<std::size_t>(p.shape()[ax]));
  }
  return Tensor<T>::make(out_shape, std::move(out), "concat", parts,
                         [impls, offsets, part_mid, outer, inner, total](TensorImpl<T>& o) {
                           for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                             auto& p = impls[pi];
                             if (!p->requires_grad) continue;
                             p->ensure_grad();
                             std::size_t pm = part_mid[pi];
                             for (std::size_t ou = 0; ou < outer; ++ou) {
                               const T* src = o.grad.data() + (ou * static_cast<std::size_t>(total) + offsets[pi]) * inner;
                               T* dst = p->grad.data() + ou * pm * inner;
                               for (std::size_t i = 0; i < pm * inner; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  int ax = detail::normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || len < 0 || start + len > a.shape()[ax])
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                ") out of bounds for axis extent " + std::to_string(a.shape()[ax]));
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  std::size_t outer, mid, inner;
  detail::axis_extents(a.shape(), ax, outer, mid, inner);
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(a.values().begin() + (o * mid + start) * inner,
              a.values().begin() + (o * mid + start + len) * inner,
              out.begin() + o * static_cast<std::size_t>(len) * inner);
  auto ai = a.impl();
  return Tensor<T>::make(out_shape, std::move(out), "slice", {a},
                         [ai, outer, mid, inner, start, len](TensorImpl<T>& o) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (std::size_t ou = 0; ou < outer; ++ou) {
                             const T* src = o.grad.data() + ou * static_cast<std::size_t>(len) * inner;
                             T* dst = ai->grad.data() + (ou * mid + start) * inner;
                             for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
  auto ai = a.impl();
  std::size_t n = a.size();
  return Tensor<T>::make(std::move(shape), a.values(), "reshape", {a}, [ai, n](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += o.grad[i];
  });
}

/// General axis permutation.
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
  int rank = a.rank();
  if (static_cast<int>(axes.size()) != rank) throw std::invalid_argument("permute: axes size != rank");
  std::vector<bool> used(rank, false);
  Shape out_shape(rank);
  for (int i = 0; i < rank; ++i) {
    int ax = axes[i];
    if (ax < 0 || ax >= rank || used[ax]) throw std::invalid_argument("permute: invalid axes");
    used[ax] = true;
    out_shape[i] = a.shape()[ax];
  }
  std::vector<std::size_t> in_strides(rank, 1), out_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.shape()[i + 1];
  for (int i = rank - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

  std::size_t n = a.size();
  // out index -> in index mapping, reused verbatim in backward
  std::vector<std::size_t> src_index(n);
  std::vector<int> coord(rank, 0);
  for (std::size_t oi = 0; oi < n; ++oi) {
    std::size_t rem = oi, ii = 0;
    for (int i = 0; i < rank; ++i) {
      std::size_t c = rem / out_strides[i];
      rem %= out_strides[i];
      ii += c * in_strides[axes[i]];
    }
    src_index[oi] = ii;
  }
  std::vector<T> out(n);
  for (std::size_t oi = 0; oi < n; ++oi) out[oi] = a[src_index[oi]];
  auto ai = a.impl();
  return Tensor<T>::make(out_shape, std::move(out), "permute", {a},
                         [ai, src_index = std::move(src_index), n](TensorImpl<T>& o) {
                           if (!ai->requires_grad) return;
                           ai->ensure_grad();
                           for (std::size_t oi = 0; oi < n; ++oi) ai->grad[src_index[oi]] += o.grad[oi];
                         });
}

/// Rank-2 transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expected rank-2, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

/// Row gather from an embedding table [V, d]; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank-2");
  int v = table.extent(0), d = table.extent(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("gather_rows: id " + std::to_string(id) + " out of range [0," +
                                  std::to_string(v) + ")");
  std::vector<T> out(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy(table.values().begin() + static_cast<std::size_t>(ids[r]) * d,
              table.values().begin() + static_cast<std::size_t>(ids[r] + 1) * d, out.begin() + r * d);
  auto ti = table.impl();
  return Tensor<T>::make({static_cast<int>(ids.size()), d}, std::move(out), "gather_rows", {table},
                         [ti, ids, d](TensorImpl<T>& o) {
                           if (!ti->requires_grad) return;
                           ti->ensure_grad();
                           for (std::size_t r = 0; r < ids.size(); ++r) {
                             T* dst = ti->grad.data() + static_cast<std::size_t>(ids[r]) * d;
                             const T* src = o.grad.data() + r * d;
                             for (int i = 0; i < d; ++i) dst[i] += src[i];
                           }
                         });
}

/// [1, d] -> [n, d]; backward sums over the repeated rows.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& a, int n) {
  if (a.rank() != 2 || a.extent(0) != 1)
    throw std::invalid_argument("tile_rows: expected [1, d], got " + shape_str(a.shape()));
  int d = a.extent(1);
  std::vector<T> out(static_cast<std::size_t>(n) * d);
  for (int r = 0; r < n; ++r) std::copy(a.values().begin(), a.values().end(), out.begin() + static_cast<std::size_t>(r) * d);
  auto ai = a.impl();
  return Tensor<T>::make({n, d}, std::move(out), "tile_rows", {a}, [ai, n, d](TensorImpl<T>& o) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int r = 0; r < n; ++r) {
      const T* src = o.grad.data() + static_cast<std::size_t>(r) * d;
      for (int i = 0; i < d; ++i) ai->grad[i] += src[i];
    }
  });
}

/// Adds a row vector [d] to every row of [n, d].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.extent(0) != x.extent(1))
    throw std::invalid_argument("add_rowvec: shapes " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  int n = x.extent(0), d = x.extent(1);
  std::vector<T> out(x.size());
  for (int r = 0; r < n; ++r)
    for (int i = 0; i < d; ++i) out[static_cast<std::size_t>(r) * d + i] = x[static_cast<std::size_t>(r) * d + i] + b[i];
  auto xi = x.impl(), bi = b.impl();
  return Tensor<T>::make(x.shape(), std::move(out), "add_rowvec", {x, b}, [xi, bi, n, d](TensorImpl<T>& o) {
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int r = 0; r < n; ++r)
        for (int i = 0; i < d; ++i) bi->grad[i] += o.grad[static_cast<std::size_t>(r) * d + i];
    }
  });
}

// convenience operators
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T c) { return scale(a, c); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return divide(a, b); }

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename T>
struct AdamWState {
  std::vector<T> m, v;
  long step = 0;
};

/// Decoupled-weight-decay adaptive-moment update with bias correction.
/// Reads param.grad and mutates param values in place.
template <typename T>
void adamw_step(Tensor<T>& param, AdamWState<T>& state, T lr, T beta1 = T(0.9), T beta2 = T(0.999),
                T eps = T(1e-8), T weight_decay = T(0)) {
  std::size_t n = param.size();
  if (state.m.size() != n) {
    state.m.assign(n, T(0));
    state.v.assign(n, T(0));
    state.step = 0;
  }
  const std::vector<T>& g = param.grad();
  std::vector<T>& p = param.values();
  ++state.step;
  T bc1 = T(1) - std::pow(beta1, static_cast<T>(state.step));
  T bc2 = T(1) - std::pow(beta2, static_cast<T>(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    p[i] -= lr * weight_decay * p[i];
    state.m[i] = beta1 * state.m[i] + (T(1) - beta1) * g[i];
    state.v[i] = beta2 * state.v[i] + (T(1) - beta2) * g[i] * g[i];
    T mhat = state.m[i] / bc1;
    T vhat = state.v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace segvg
