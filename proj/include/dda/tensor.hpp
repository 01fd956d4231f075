#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dda/common.hpp"
#include "dda/rng.hpp"

namespace dda {

template <typename T>
class Tape;
template <typename T>
class Gradients;

// Dense row-major tensor. Copies are shallow (shared buffer); tensors on a
// tape are treated as immutable once created.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    require(shape_numel(shape_) == static_cast<int64_t>(values.size()),
            "tensor: data length " + std::to_string(values.size()) +
                " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.vec().begin(), t.vec().end(), v);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }

  std::vector<T>& vec() { return *data_; }
  const std::vector<T>& vec() const { return *data_; }
  T* ptr() { return data_->data(); }
  const T* ptr() const { return data_->data(); }
  T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  T item() const {
    require(size() == 1, "item: tensor has " + std::to_string(size()) +
                             " elements, expected exactly 1");
    return (*data_)[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int64_t node() const { return node_; }

  // Same buffer, no tape participation.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Deep copy, no tape participation.
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(data_->size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(v));
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  int64_t node_ = -1;
  friend class Tape<T>;
};

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, T scale = T(1)) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal()) * scale;
  return t;
}

template <typename T>
Tensor<T> rand_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1)) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// ---------------------------------------------------------------------------
// Tape: define-by-run reverse-mode autodiff.
// ---------------------------------------------------------------------------

template <typename T>
class Gradients {
 public:
  bool has(const Tensor<T>& leaf) const {
    return leaf.node() >= 0 && by_node_.count(leaf.node()) > 0;
  }
  const Tensor<T>& at(const Tensor<T>& leaf) const {
    require(leaf.node() >= 0, "gradients: tensor is not a registered leaf");
    auto it = by_node_.find(leaf.node());
    require(it != by_node_.end(), "gradients: tensor is not a leaf of this tape");
    return it->second;
  }

 private:
  std::unordered_map<int64_t, Tensor<T>> by_node_;
  friend class Tape<T>;
};

template <typename T>
class Tape {
 public:
  GuardMode guard = GuardMode::Training;

  // Registers a differentiated leaf sharing the value's buffer.
  Tensor<T> leaf(const Tensor<T>& value) {
    Tensor<T> t = value.detached();
    t.tape_ = this;
    t.node_ = add_node(t.shape(), nullptr, true);
    return t;
  }

  Tensor<T> track(Tensor<T> out, std::function<void(Tape&, int64_t)> back) {
    out.tape_ = this;
    out.node_ = add_node(out.shape(), std::move(back), false);
    return out;
  }

  size_t node_count() const { return nodes_.size(); }

  // Runs one reverse pass from a scalar output and returns leaf gradients.
  // Leaves not reachable from the output receive zero gradients.
  Gradients<T> backward(const Tensor<T>& out) {
    require(out.tape() == this,
            out.on_tape() ? "backward: output lies on a different tape"
                          : "backward: output tensor is detached from any tape");
    require(out.size() == 1, "backward: output must be scalar, got shape " +
                                 shape_str(out.shape()));
    grads_.clear();
    grads_.resize(nodes_.size());
    grad_acc(out.node(), 1)[0] = T(1);
    for (int64_t i = out.node(); i >= 0; --i) {
      if (grads_[static_cast<size_t>(i)] && nodes_[static_cast<size_t>(i)].back)
        nodes_[static_cast<size_t>(i)].back(*this, i);
    }
    Gradients<T> g;
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].is_leaf) continue;
      auto id = static_cast<int64_t>(i);
      if (grads_[i])
        g.by_node_.emplace(id, Tensor<T>(nodes_[i].shape, std::move(*grads_[i])));
      else
        g.by_node_.emplace(id, Tensor<T>(nodes_[i].shape));
    }
    grads_.clear();
    return g;
  }

  // Gradient buffer access for op backward closures.
  const std::vector<T>* grad(int64_t node) const {
    return grads_[static_cast<size_t>(node)].get();
  }
  std::vector<T>& grad_acc(int64_t node, int64_t n) {
    auto& p = grads_[static_cast<size_t>(node)];
    if (!p) p = std::make_unique<std::vector<T>>(static_cast<size_t>(n), T(0));
    return *p;
  }

 private:
  struct Node {
    std::function<void(Tape&, int64_t)> back;
    Shape shape;
    bool is_leaf;
  };

  int64_t add_node(Shape shape, std::function<void(Tape&, int64_t)> back,
                   bool is_leaf) {
    nodes_.push_back(Node{std::move(back), std::move(shape), is_leaf});
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<std::vector<T>>> grads_;
};

template <typename T>
Gradients<T> backward(const Tensor<T>& scalar_out) {
  require(scalar_out.on_tape(), "backward: tensor is detached from any tape");
  return scalar_out.tape()->backward(scalar_out);
}

template <typename T>
Tensor<T> stop_grad(const Tensor<T>& x) {
  return x.detached();
}

// ---------------------------------------------------------------------------
// Broadcasting machinery (numpy-style, right-aligned).
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (size_t i = 0; i < nd; ++i) {
    int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da == db || da == 1 || db == 1) {
      out[i] = std::max(da, db);
    } else {
      fail(std::string(op) + ": shapes " + shape_str(a) + " and " +
           shape_str(b) + " are not broadcastable");
    }
  }
  return out;
}

// Walks every element of `out`, supplying flat offsets into two (possibly
// broadcast) operands.
template <class F>
inline void bc_walk(const Shape& out, const Shape& as, const Shape& bs, F&& fn) {
  int nd = static_cast<int>(out.size());
  if (nd == 0) {
    fn(int64_t(0), int64_t(0), int64_t(0));
    return;
  }
  std::vector<int64_t> astr(nd, 0), bstr(nd, 0);
  {
    int64_t s = 1;
    for (int i = static_cast<int>(as.size()) - 1, j = nd - 1; i >= 0; --i, --j) {
      astr[j] = as[i] == 1 ? 0 : s;
      s *= as[i];
    }
    s = 1;
    for (int i = static_cast<int>(bs.size()) - 1, j = nd - 1; i >= 0; --i, --j) {
      bstr[j] = bs[i] == 1 ? 0 : s;
      s *= bs[i];
    }
  }
  const int64_t inner = out[static_cast<size_t>(nd - 1)];
  const int64_t ia = astr[static_cast<size_t>(nd - 1)];
  const int64_t ib = bstr[static_cast<size_t>(nd - 1)];
  std::vector<int64_t> idx(static_cast<size_t>(std::max(nd - 1, 0)), 0);
  int64_t aoff = 0, boff = 0, o = 0;
  for (;;) {
    for (int64_t i = 0; i < inner; ++i) fn(o + i, aoff + i * ia, boff + i * ib);
    o += inner;
    int d = nd - 2;
    for (; d >= 0; --d) {
      aoff += astr[static_cast<size_t>(d)];
      boff += bstr[static_cast<size_t>(d)];
      if (++idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
      aoff -= astr[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      boff -= bstr[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
    if (d < 0) break;
  }
}

template <typename T>
Tape<T>* common_tape(const char* op, std::initializer_list<const Tensor<T>*> ts) {
  Tape<T>* tp = nullptr;
  for (const Tensor<T>* t : ts) {
    if (!t->on_tape()) continue;
    if (tp && tp != t->tape())
      fail(std::string(op) + ": operands lie on different tapes");
    tp = t->tape();
  }
  return tp;
}

template <typename T>
GuardMode guard_of(Tape<T>* tp) {
  return tp ? tp->guard : GuardMode::Training;
}

// Elementwise binary op with broadcasting. ga/gb map
// (out_grad, a_val, b_val, out_val) to the gradient contribution.
template <typename T, class F, class Ga, class Gb>
Tensor<T> ew_binary(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    F f, Ga ga, Gb gb) {
  Shape os = broadcast_shape(name, a.shape(), b.shape());
  Tensor<T> out(os);
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  T* yp = out.ptr();
  const bool same = a.shape() == b.shape();
  if (same) {
    const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) yp[i] = f(ap[i], bp[i]);
  } else {
    bc_walk(os, a.shape(), b.shape(),
            [&](int64_t o, int64_t i, int64_t j) { yp[o] = f(ap[i], bp[j]); });
  }
  Tape<T>* tp = common_tape<T>(name, {&a, &b});
  if (!tp) return out;
  const int64_t an = a.on_tape() ? a.node() : -1;
  const int64_t bn = b.on_tape() ? b.node() : -1;
  Tensor<T> av = a.detached(), bv = b.detached(), yv = out.detached();
  return tp->track(std::move(out), [=](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    if (an >= 0) {
      std::vector<T>& gab = t.grad_acc(an, av.size());
      if (same) {
        for (int64_t i = 0; i < av.size(); ++i)
          gab[static_cast<size_t>(i)] += ga(g[static_cast<size_t>(i)], av[i], bv[i], yv[i]);
      } else {
        bc_walk(yv.shape(), av.shape(), bv.shape(),
                [&](int64_t o, int64_t i, int64_t j) {
                  gab[static_cast<size_t>(i)] +=
                      ga(g[static_cast<size_t>(o)], av[i], bv[j], yv[o]);
                });
      }
    }
    if (bn >= 0) {
      std::vector<T>& gbb = t.grad_acc(bn, bv.size());
      if (same) {
        for (int64_t i = 0; i < bv.size(); ++i)
          gbb[static_cast<size_t>(i)] += gb(g[static_cast<size_t>(i)], av[i], bv[i], yv[i]);
      } else {
        bc_walk(yv.shape(), av.shape(), bv.shape(),
                [&](int64_t o, int64_t i, int64_t j) {
                  gbb[static_cast<size_t>(j)] +=
                      gb(g[static_cast<size_t>(o)], av[i], bv[j], yv[o]);
                });
      }
    }
  });
}

// Elementwise unary op. dydx maps (out_grad, x_val, y_val) to the gradient.
template <typename T, class F, class G>
Tensor<T> ew_unary(const char* name, const Tensor<T>& x, F f, G dydx) {
  Tensor<T> out(x.shape());
  const T* xp = x.ptr();
  T* yp = out.ptr();
  const int64_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
  for (int64_t i = 0; i < n; ++i) yp[i] = f(xp[i]);
  if (!x.on_tape()) return out;
  Tape<T>* tp = x.tape();
  const int64_t xn = x.node();
  Tensor<T> xv = x.detached(), yv = out.detached();
  return tp->track(std::move(out), [=](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, xv.size());
    for (int64_t i = 0; i < xv.size(); ++i)
      gx[static_cast<size_t>(i)] += dydx(g[static_cast<size_t>(i)], xv[i], yv[i]);
  });
}

// ---------------------------------------------------------------------------
// Arithmetic ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return ew_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return ew_binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return ew_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y, T) { return g * y; }, [](T g, T x, T, T) { return g * x; });
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  GuardMode gm = guard_of(common_tape<T>("div", {&a, &b}));
  const T eps = guard_epsilon<T>();
  if (gm == GuardMode::Strict) {
    for (int64_t i = 0; i < b.size(); ++i)
      require(b[i] != T(0), "div: division by zero in strict mode");
  }
  auto safe = [eps](T y) {
    if (std::abs(y) < eps) return y < T(0) ? -eps : eps;
    return y;
  };
  return ew_binary<T>(
      "div", a, b, [safe](T x, T y) { return x / safe(y); },
      [safe](T g, T, T y, T) { return g / safe(y); },
      [safe](T g, T x, T y, T) {
        T d = safe(y);
        return -g * x / (d * d);
      });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return ew_unary<T>(
      "neg", x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return ew_unary<T>(
      "exp", x, [](T v) { return std::exp(v); },
      [](T g, T, T y) { return g * y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  GuardMode gm = guard_of(x.tape());
  const T eps = guard_epsilon<T>();
  if (gm == GuardMode::Strict) {
    for (int64_t i = 0; i < x.size(); ++i)
      require(x[i] > T(0), "log: non-positive argument in strict mode");
  }
  return ew_unary<T>(
      "log", x, [eps](T v) { return std::log(std::max(v, eps)); },
      [eps](T g, T v, T) { return g / std::max(v, eps); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  GuardMode gm = guard_of(x.tape());
  if (gm == GuardMode::Strict) {
    for (int64_t i = 0; i < x.size(); ++i)
      require(x[i] >= T(0), "sqrt: negative argument in strict mode");
  }
  // Tiny floor keeps the derivative finite at zero without touching
  // any realistically sized value.
  const T tiny = sizeof(T) == 8 ? T(1e-30) : T(1e-20);
  return ew_unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(std::max(v, T(0))); },
      [tiny](T g, T v, T y) { return v > tiny ? g / (T(2) * y) : T(0); });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& x, double p) {
  GuardMode gm = guard_of(x.tape());
  const T eps = guard_epsilon<T>();
  const bool integral = p == std::floor(p);
  if (gm == GuardMode::Strict && !integral) {
    for (int64_t i = 0; i < x.size(); ++i)
      require(x[i] >= T(0), "pow: negative base with fractional exponent in strict mode");
  }
  return ew_unary<T>(
      "pow", x,
      [p, integral, eps](T v) {
        T base = integral ? v : std::max(v, eps);
        return static_cast<T>(std::pow(base, p));
      },
      [p, integral, eps](T g, T v, T) {
        T base = integral ? v : std::max(v, eps);
        return static_cast<T>(g * static_cast<T>(p) * std::pow(base, p - 1.0));
      });
}

template <typename T>
Tensor<T> sin(const Tensor<T>& x) {
  return ew_unary<T>(
      "sin", x, [](T v) { return std::sin(v); },
      [](T g, T v, T) { return g * std::cos(v); });
}

template <typename T>
Tensor<T> cos(const Tensor<T>& x) {
  return ew_unary<T>(
      "cos", x, [](T v) { return std::cos(v); },
      [](T g, T v, T) { return -g * std::sin(v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return ew_unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return ew_unary<T>(
      "softplus", x,
      [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T g, T v, T) {
        T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                        : std::exp(v) / (T(1) + std::exp(v));
        return g * s;
      });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return ew_unary<T>(
      "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T g, T v, T) { return (v >= lo && v <= hi) ? g : T(0); });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return clamp(x, lo, std::numeric_limits<T>::infinity());
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return ew_unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

// Operator sugar (tensor-tensor and tensor-scalar).
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return divide(a, b); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, double s) { return add(a, Tensor<T>::scalar(T(s))); }
template <typename T>
Tensor<T> operator+(double s, const Tensor<T>& a) { return add(Tensor<T>::scalar(T(s)), a); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, double s) { return sub(a, Tensor<T>::scalar(T(s))); }
template <typename T>
Tensor<T> operator-(double s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(T(s)), a); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, double s) { return mul(a, Tensor<T>::scalar(T(s))); }
template <typename T>
Tensor<T> operator*(double s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(T(s)), a); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, double s) { return divide(a, Tensor<T>::scalar(T(s))); }
template <typename T>
Tensor<T> operator/(double s, const Tensor<T>& a) { return divide(Tensor<T>::scalar(T(s)), a); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  // One free dimension may be inferred with -1.
  int64_t prod = 1, infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      require(infer < 0, "reshape: at most one inferred dimension");
      infer = static_cast<int64_t>(i);
    } else {
      prod *= shape[i];
    }
  }
  if (infer >= 0) shape[static_cast<size_t>(infer)] = x.size() / prod;
  require(shape_numel(shape) == x.size(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> out = x.detached();
  Tensor<T> view(std::move(shape), std::vector<T>(out.vec()));
  if (!x.on_tape()) return view;
  const int64_t xn = x.node();
  return x.tape()->track(std::move(view), [xn](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, static_cast<int64_t>(g.size()));
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  require(x.ndim() == 2, "transpose: expected rank-2 tensor, got " + shape_str(x.shape()));
  const int64_t m = x.dim(0), n = x.dim(1);
  Tensor<T> out(Shape{n, m});
  const T* xp = x.ptr();
  T* yp = out.ptr();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) yp[j * m + i] = xp[i * n + j];
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  return x.tape()->track(std::move(out), [xn, m, n](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, m * n);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        gx[static_cast<size_t>(i * n + j)] += g[static_cast<size_t>(j * m + i)];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int nd = static_cast<int>(s0.size());
  require(axis >= 0 && axis < nd, "concat: axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    require(p.ndim() == nd, "concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis)
        require(p.dim(d) == s0[static_cast<size_t>(d)],
                "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    total += p.dim(axis);
  }
  Shape os = s0;
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
  for (int d = static_cast<int>(axis) + 1; d < nd; ++d) inner *= s0[static_cast<size_t>(d)];
  Tensor<T> out(os);
  T* yp = out.ptr();
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t na = p.dim(axis);
    const T* xp = p.ptr();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(yp + (o * total + off) * inner, xp + o * na * inner,
                  static_cast<size_t>(na * inner) * sizeof(T));
    off += na;
  }
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tape<T>* tp = nullptr;
  for (const auto& p : parts)
    if (p.on_tape()) {
      require(!tp || tp == p.tape(), "concat: operands lie on different tapes");
      tp = p.tape();
    }
  if (!tp) return out;
  struct Src { int64_t node, na, off; };
  std::vector<Src> srcs;
  int64_t off2 = 0;
  for (const auto& p : parts) {
    srcs.push_back({p.on_tape() ? p.node() : -1, p.dim(axis), off2});
    off2 += p.dim(axis);
  }
  return tp->track(std::move(out), [srcs, outer, inner, total](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    for (const auto& s : srcs) {
      if (s.node < 0) continue;
      std::vector<T>& gx = t.grad_acc(s.node, outer * s.na * inner);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t r = 0; r < s.na * inner; ++r)
          gx[static_cast<size_t>(o * s.na * inner + r)] +=
              g[static_cast<size_t>((o * total + s.off) * inner + r)];
    }
  });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int64_t axis,
                       const std::vector<int64_t>& indices) {
  const int nd = static_cast<int>(x.ndim());
  require(axis >= 0 && axis < nd, "index_select: axis out of range");
  const int64_t n_axis = x.dim(axis);
  for (int64_t idx : indices)
    require(idx >= 0 && idx < n_axis, "index_select: index " + std::to_string(idx) +
                                          " out of range [0," + std::to_string(n_axis) + ")");
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = static_cast<int>(axis) + 1; d < nd; ++d) inner *= x.dim(d);
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = static_cast<int64_t>(indices.size());
  Tensor<T> out(os);
  const T* xp = x.ptr();
  T* yp = out.ptr();
  const int64_t k = static_cast<int64_t>(indices.size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < k; ++j)
      std::memcpy(yp + (o * k + j) * inner, xp + (o * n_axis + indices[static_cast<size_t>(j)]) * inner,
                  static_cast<size_t>(inner) * sizeof(T));
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  auto idxs = indices;
  return x.tape()->track(std::move(out), [xn, idxs, outer, inner, n_axis, k](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, outer * n_axis * inner);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < k; ++j) {
        const int64_t src = (o * k + j) * inner;
        const int64_t dst = (o * n_axis + idxs[static_cast<size_t>(j)]) * inner;
        for (int64_t i = 0; i < inner; ++i)
          gx[static_cast<size_t>(dst + i)] += g[static_cast<size_t>(src + i)];
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

namespace detail {

inline Shape reduced_shape(const Shape& xs, const std::vector<int64_t>& axes,
                           bool keepdims) {
  std::vector<char> red(xs.size(), 0);
  for (int64_t a : axes) {
    require(a >= 0 && a < static_cast<int64_t>(xs.size()), "reduce: axis out of range");
    red[static_cast<size_t>(a)] = 1;
  }
  Shape os;
  for (size_t d = 0; d < xs.size(); ++d) {
    if (red[d]) {
      if (keepdims) os.push_back(1);
    } else {
      os.push_back(xs[d]);
    }
  }
  return os;
}

// Walks every element of x, supplying (x_offset, out_offset) where reduced
// dims contribute stride 0 to the out offset.
template <class F>
inline void reduce_walk(const Shape& xs, const std::vector<char>& red, F&& fn) {
  int nd = static_cast<int>(xs.size());
  if (nd == 0) {
    fn(int64_t(0), int64_t(0));
    return;
  }
  std::vector<int64_t> ostr(xs.size(), 0);
  int64_t s = 1;
  for (int d = nd - 1; d >= 0; --d) {
    if (!red[static_cast<size_t>(d)]) {
      ostr[static_cast<size_t>(d)] = s;
      s *= xs[static_cast<size_t>(d)];
    }
  }
  const int64_t inner = xs[static_cast<size_t>(nd - 1)];
  const int64_t io = ostr[static_cast<size_t>(nd - 1)];
  std::vector<int64_t> idx(static_cast<size_t>(std::max(nd - 1, 0)), 0);
  int64_t ooff = 0, x = 0;
  for (;;) {
    for (int64_t i = 0; i < inner; ++i) fn(x + i, ooff + i * io);
    x += inner;
    int d = nd - 2;
    for (; d >= 0; --d) {
      ooff += ostr[static_cast<size_t>(d)];
      if (++idx[static_cast<size_t>(d)] < xs[static_cast<size_t>(d)]) break;
      ooff -= ostr[static_cast<size_t>(d)] * xs[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
    if (d < 0) break;
  }
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::vector<int64_t> axes, bool keepdims = false) {
  if (axes.empty())
    for (int64_t d = 0; d < x.ndim(); ++d) axes.push_back(d);
  std::vector<char> red(x.shape().size(), 0);
  for (int64_t a : axes) red[static_cast<size_t>(a)] = 1;
  Shape os = detail::reduced_shape(x.shape(), axes, keepdims);
  Tensor<T> out(os);
  const T* xp = x.ptr();
  T* yp = out.ptr();
  detail::reduce_walk(x.shape(), red,
                      [&](int64_t xi, int64_t oi) { yp[oi] += xp[xi]; });
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  Shape xs = x.shape();
  const int64_t xn_el = x.size();
  return x.tape()->track(std::move(out), [xn, xs, red, xn_el](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, xn_el);
    detail::reduce_walk(xs, red, [&](int64_t xi, int64_t oi) {
      gx[static_cast<size_t>(xi)] += g[static_cast<size_t>(oi)];
    });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::vector<int64_t> axes, bool keepdims = false) {
  if (axes.empty())
    for (int64_t d = 0; d < x.ndim(); ++d) axes.push_back(d);
  int64_t n = 1;
  for (int64_t a : axes) n *= x.dim(a);
  Tensor<T> s = sum(x, axes, keepdims);
  return s * (1.0 / static_cast<double>(n));
}

template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, std::vector<int64_t> axes, bool keepdims = false) {
  if (axes.empty())
    for (int64_t d = 0; d < x.ndim(); ++d) axes.push_back(d);
  std::vector<char> red(x.shape().size(), 0);
  for (int64_t a : axes) red[static_cast<size_t>(a)] = 1;
  Shape os = detail::reduced_shape(x.shape(), axes, keepdims);
  Tensor<T> out = Tensor<T>::full(os, -std::numeric_limits<T>::infinity());
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.size()), -1);
  const T* xp = x.ptr();
  T* yp = out.ptr();
  detail::reduce_walk(x.shape(), red, [&](int64_t xi, int64_t oi) {
    if (xp[xi] > yp[oi]) {  // ties keep the first (lowest flat index)
      yp[oi] = xp[xi];
      (*arg)[static_cast<size_t>(oi)] = xi;
    }
  });
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  const int64_t xn_el = x.size();
  return x.tape()->track(std::move(out), [xn, arg, xn_el](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, xn_el);
    for (size_t oi = 0; oi < arg->size(); ++oi)
      gx[static_cast<size_t>((*arg)[oi])] += g[oi];
  });
}

// ---------------------------------------------------------------------------
// Softmax over an axis (max-stabilized primitive).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int64_t axis) {
  const int nd = static_cast<int>(x.ndim());
  require(axis >= 0 && axis < nd, "softmax: axis out of range");
  int64_t outer = 1, n = x.dim(axis), inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = static_cast<int>(axis) + 1; d < nd; ++d) inner *= x.dim(d);
  Tensor<T> out(x.shape());
  const T* xp = x.ptr();
  T* yp = out.ptr();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (int64_t j = 0; j < n; ++j) mx = std::max(mx, xp[base + j * inner]);
      T s = T(0);
      for (int64_t j = 0; j < n; ++j) {
        T e = std::exp(xp[base + j * inner] - mx);
        yp[base + j * inner] = e;
        s += e;
      }
      for (int64_t j = 0; j < n; ++j) yp[base + j * inner] /= s;
    }
  }
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  Tensor<T> yv = out.detached();
  const int64_t xn_el = x.size();
  return x.tape()->track(std::move(out), [xn, yv, outer, n, inner, xn_el](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gx = t.grad_acc(xn, xn_el);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < inner; ++i) {
        const int64_t base = o * n * inner + i;
        T dot = T(0);
        for (int64_t j = 0; j < n; ++j)
          dot += g[static_cast<size_t>(base + j * inner)] * yv[base + j * inner];
        for (int64_t j = 0; j < n; ++j)
          gx[static_cast<size_t>(base + j * inner)] +=
              yv[base + j * inner] * (g[static_cast<size_t>(base + j * inner)] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Matrix multiply (2-D), Eigen-backed.
// ---------------------------------------------------------------------------

template <typename T>
using EigenRowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 2 && b.ndim() == 2,
          "matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  {
    Eigen::Map<const EigenRowMat<T>> A(a.ptr(), m, k), B(b.ptr(), k, n);
    Eigen::Map<EigenRowMat<T>> C(out.ptr(), m, n);
    C.noalias() = A * B;
  }
  Tape<T>* tp = common_tape<T>("matmul", {&a, &b});
  if (!tp) return out;
  const int64_t an = a.on_tape() ? a.node() : -1;
  const int64_t bn = b.on_tape() ? b.node() : -1;
  Tensor<T> av = a.detached(), bv = b.detached();
  return tp->track(std::move(out), [an, bn, av, bv, m, k, n](Tape<T>& t, int64_t self) {
    Eigen::Map<const EigenRowMat<T>> G(t.grad(self)->data(), m, n);
    if (an >= 0) {
      Eigen::Map<EigenRowMat<T>> GA(t.grad_acc(an, m * k).data(), m, k);
      Eigen::Map<const EigenRowMat<T>> B(bv.ptr(), k, n);
      GA.noalias() += G * B.transpose();
    }
    if (bn >= 0) {
      Eigen::Map<EigenRowMat<T>> GB(t.grad_acc(bn, k * n).data(), k, n);
      Eigen::Map<const EigenRowMat<T>> A(av.ptr(), m, k);
      GB.noalias() += A.transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// Straight-through estimation.
// ---------------------------------------------------------------------------

// Forward takes the hard values; backward passes gradients to the smooth
// input unchanged.
template <typename T>
Tensor<T> override_value(const Tensor<T>& smooth, const Tensor<T>& hard) {
  require(smooth.shape() == hard.shape(),
          "straight_through: forward and surrogate shapes disagree, " +
              shape_str(hard.shape()) + " vs " + shape_str(smooth.shape()));
  Tensor<T> out = hard.clone();
  if (!smooth.on_tape()) return out;
  const int64_t sn = smooth.node();
  return smooth.tape()->track(std::move(out), [sn](Tape<T>& t, int64_t self) {
    const std::vector<T>& g = *t.grad(self);
    std::vector<T>& gs = t.grad_acc(sn, static_cast<int64_t>(g.size()));
    for (size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
}

template <typename T, class FwdFn, class SurFn>
Tensor<T> straight_through(FwdFn&& forward_fn, SurFn&& surrogate_fn,
                           const Tensor<T>& x) {
  Tensor<T> ys = surrogate_fn(x);
  Tensor<T> yf = forward_fn(stop_grad(x));
  return override_value(ys, yf);
}

// ---------------------------------------------------------------------------
// Composites.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int64_t axis, double eps = 1e-12) {
  Tensor<T> sq = sum(mul(x, x), {axis}, /*keepdims=*/true);
  Tensor<T> norm = sqrt(clamp_min(sq, T(eps)));
  return divide(x, norm);
}

// M x M matrix of squared Euclidean distances between rows of Z.
template <typename T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& z) {
  require(z.ndim() == 2, "pairwise_sq_dist: expected rank-2, got " + shape_str(z.shape()));
  require(z.dim(0) >= 2, "pairwise_sq_dist: need at least two rows");
  require(z.dim(1) >= 1, "pairwise_sq_dist: zero-dimensional points");
  Tensor<T> sq = sum(mul(z, z), {1}, true);              // [M,1]
  Tensor<T> cross = matmul(z, transpose2d(z));           // [M,M]
  Tensor<T> d2 = sq + transpose2d(sq) - 2.0 * cross;
  return clamp_min(d2, T(0));
}

template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x, int64_t axis, bool keepdims = false) {
  Tensor<T> mx = stop_grad(reduce_max(x, {axis}, true));
  Tensor<T> s = log(sum(exp(x - mx), {axis}, true)) + mx;
  if (!keepdims) {
    Shape os = s.shape();
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    return reshape(s, os);
  }
  return s;
}

}  // namespace dda
