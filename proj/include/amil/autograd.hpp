#pragma once

// Dense 64-bit tensors with tape-based reverse-mode differentiation.
//
// Every op takes the Tape it records on as its first argument. A Tensor is a
// shared handle: copies alias the same storage, clone() makes a deep copy.
// Gradients accumulate into Tensor::grad() until zero_grad().

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amil/error.hpp"

namespace amil::autograd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(numel(shape), 0.0);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> data(numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  /// Allocates a zero gradient on first use.
  std::span<double> grad_accumulator() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor out(shape(), node_->data, requires_grad());
    return out;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Node> node_;
};

/// Boolean validity array. Broadcasts onto a tensor shape with the same
/// right-aligned rule as binary ops (extents equal or 1).
class Mask {
 public:
  Mask() = default;
  Mask(Shape shape, std::vector<std::uint8_t> valid) : shape_(std::move(shape)), valid_(std::move(valid)) {
    if (valid_.size() != numel(shape_)) {
      throw ShapeError("mask length " + std::to_string(valid_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }
  static Mask all_valid(Shape shape) {
    std::vector<std::uint8_t> v(numel(shape), 1);
    return Mask(std::move(shape), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::span<const std::uint8_t> values() const { return valid_; }
  bool operator[](std::size_t i) const { return valid_[i] != 0; }

 private:
  Shape shape_;
  std::vector<std::uint8_t> valid_;
};

/// Ordered record of executed primitives. Not thread-safe; use one per thread.
class Tape {
 public:
  struct Options {
    bool recording = true;
    // Test hook: the backward rule of the named op is scaled by corrupt_scale.
    std::string corrupt_op;
    double corrupt_scale = 1.5;
  };

  using BackwardFn = std::function<void(std::span<const double> output_grad)>;

  Tape() = default;
  explicit Tape(Options options) : options_(std::move(options)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape no_grad() {
    Options o;
    o.recording = false;
    return Tape(std::move(o));
  }

  bool recording() const { return options_.recording; }
  std::size_t size() const { return recorded_; }
  std::size_t backward_visits() const { return visits_; }
  bool consumed() const { return consumed_; }

  /// True when the op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const {
    if (!options_.recording) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  }

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn) {
    output.set_requires_grad(true);
    entries_.push_back(Entry{std::string(op), std::move(inputs), output, std::move(fn)});
    ++recorded_;
  }

 private:
  friend void backward(Tensor loss, Tape& tape);

  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };

  Options options_;
  std::vector<Entry> entries_;
  std::size_t recorded_ = 0;
  std::size_t visits_ = 0;
  bool consumed_ = false;
};

/// Runs the tape in reverse from a scalar loss. A tape can be traversed once.
inline void backward(Tensor loss, Tape& tape) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  if (tape.consumed_) throw DomainError("backward: tape was already traversed");
  const bool on_tape = std::any_of(tape.entries_.begin(), tape.entries_.end(),
                                   [&](const Tape::Entry& e) { return e.output.same_storage(loss); });
  if (!on_tape) throw DomainError("backward: loss was not produced on this tape");
  tape.consumed_ = true;

  loss.grad_accumulator()[0] += 1.0;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    ++tape.visits_;
    if (!it->output.has_grad()) continue;
    const bool corrupt = !tape.options_.corrupt_op.empty() && it->op == tape.options_.corrupt_op;
    std::vector<std::vector<double>> before;
    if (corrupt) {
      for (auto& in : it->inputs) {
        auto g = in.grad_accumulator();
        before.emplace_back(g.begin(), g.end());
      }
    }
    it->fn(it->output.grad());
    if (corrupt) {
      for (std::size_t k = 0; k < it->inputs.size(); ++k) {
        auto g = it->inputs[k].grad_accumulator();
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] = before[k][i] + tape.options_.corrupt_scale * (g[i] - before[k][i]);
        }
      }
    }
    // Intermediates are no longer needed once their rule has run.
    it->fn = nullptr;
  }
  tape.entries_.clear();
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

/// Maps each flat index of `to` onto the flat index of `from` under
/// right-aligned broadcasting. Empty result means the shapes are equal.
inline std::vector<std::size_t> broadcast_map(const Shape& from, const Shape& to, std::string_view op) {
  if (from == to) return {};
  auto fail = [&] {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(from) + " onto " + to_string(to));
  };
  if (from.size() > to.size()) fail();
  const std::size_t offset = to.size() - from.size();
  std::vector<std::size_t> from_stride(to.size(), 0);
  std::size_t stride = 1;
  for (std::size_t d = from.size(); d-- > 0;) {
    const std::size_t td = d + offset;
    if (from[d] == to[td]) {
      from_stride[td] = stride;
    } else if (from[d] != 1) {
      fail();
    }
    stride *= from[d];
  }
  const std::size_t n = numel(to);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(to.size(), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = src;
    for (std::size_t d = to.size(); d-- > 0;) {
      ++idx[d];
      src += from_stride[d];
      if (idx[d] < to[d]) break;
      src -= from_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

inline std::vector<std::uint8_t> expand_mask(const Mask& mask, const Shape& shape, std::string_view op) {
  auto map = broadcast_map(mask.shape(), shape, op);
  if (map.empty()) return {mask.values().begin(), mask.values().end()};
  std::vector<std::uint8_t> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = mask.values()[map[i]];
  return out;
}

/// outer x n x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, std::string_view op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape));
  }
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.n = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

template <typename F, typename DF>
Tensor unary(Tape& tape, std::string_view op, const Tensor& x, F f, DF df) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  Tensor y(x.shape(), std::move(out));
  if (tape.tracks({&x})) {
    tape.record(op, {x}, y, [x, y, df](std::span<const double> g) mutable {
      auto gx = x.grad_accumulator();
      const auto xs = x.data();
      const auto ys = y.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xs[i], ys[i]);
    });
  }
  return y;
}

// da and db are partial derivatives of the result w.r.t. each operand.
template <typename F, typename DA, typename DB>
Tensor binary(Tape& tape, std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto map = std::make_shared<const std::vector<std::size_t>>(broadcast_map(b.shape(), a.shape(), op));
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<double> out(as.size());
  if (map->empty()) {
    for (std::size_t i = 0; i < as.size(); ++i) out[i] = f(as[i], bs[i]);
  } else {
    for (std::size_t i = 0; i < as.size(); ++i) out[i] = f(as[i], bs[(*map)[i]]);
  }
  Tensor y(a.shape(), std::move(out));
  if (tape.tracks({&a, &b})) {
    tape.record(op, {a, b}, y, [a, b, map, da, db](std::span<const double> g) mutable {
      const auto as = a.data();
      const auto bs = b.data();
      auto bi = [&](std::size_t i) { return map->empty() ? i : (*map)[i]; };
      if (a.requires_grad()) {
        auto ga = a.grad_accumulator();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * da(as[i], bs[bi(i)]);
      }
      if (b.requires_grad()) {
        auto gb = b.grad_accumulator();
        for (std::size_t i = 0; i < as.size(); ++i) gb[bi(i)] += g[i] * db(as[i], bs[bi(i)]);
      }
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

/// Binary ops broadcast b onto a's shape (right-aligned, extents equal or 1).
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor tanh(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(Tape& tape, const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) {
      std::ostringstream os;
      os << "log: input must be strictly positive, got " << v;
      throw DomainError(os.str());
    }
  }
  return detail::unary(
      tape, "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor negate(Tape& tape, const Tensor& x) {
  return detail::unary(
      tape, "negate", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor scale(Tape& tape, const Tensor& x, double factor) {
  return detail::unary(
      tape, "scale", x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

/// Gradient passes only where lo <= x <= hi.
inline Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  return detail::unary(
      tape, "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

enum class ElementwiseKind { add, mul, sub, tanh, sigmoid, relu, exp, log, negate, scale };

/// Dispatcher over the elementwise family; `factor` is used by scale only.
inline Tensor elementwise(Tape& tape, ElementwiseKind kind, const Tensor& a,
                          const std::optional<Tensor>& b = std::nullopt, double factor = 1.0) {
  auto need_b = [&]() -> const Tensor& {
    if (!b) throw ShapeError("elementwise: binary op requires a second operand");
    return *b;
  };
  switch (kind) {
    case ElementwiseKind::add: return add(tape, a, need_b());
    case ElementwiseKind::mul: return mul(tape, a, need_b());
    case ElementwiseKind::sub: return sub(tape, a, need_b());
    case ElementwiseKind::tanh: return tanh(tape, a);
    case ElementwiseKind::sigmoid: return sigmoid(tape, a);
    case ElementwiseKind::relu: return relu(tape, a);
    case ElementwiseKind::exp: return exp(tape, a);
    case ElementwiseKind::log: return log(tape, a);
    case ElementwiseKind::negate: return negate(tape, a);
    case ElementwiseKind::scale: return scale(tape, a, factor);
  }
  throw DomainError("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.extent(0));
  const auto k = static_cast<Eigen::Index>(a.extent(1));
  const auto n = static_cast<Eigen::Index>(b.extent(1));
  Tensor y = Tensor::zeros({a.extent(0), b.extent(1)});
  detail::MutMap(y.mutable_data().data(), m, n).noalias() =
      detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
  if (tape.tracks({&a, &b})) {
    tape.record("matmul", {a, b}, y, [a, b, m, k, n](std::span<const double> g) mutable {
      detail::ConstMap G(g.data(), m, n);
      if (a.requires_grad()) {
        detail::MutMap(a.grad_accumulator().data(), m, k).noalias() +=
            G * detail::ConstMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::MutMap(b.grad_accumulator().data(), k, n).noalias() +=
            detail::ConstMap(a.data().data(), m, k).transpose() * G;
      }
    });
  }
  return y;
}

/// Batched matmul: [B x m x k] by [B x k x n].
inline Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1)) {
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t batch = a.extent(0);
  const auto m = static_cast<Eigen::Index>(a.extent(1));
  const auto k = static_cast<Eigen::Index>(a.extent(2));
  const auto n = static_cast<Eigen::Index>(b.extent(2));
  Tensor y = Tensor::zeros({batch, a.extent(1), b.extent(2)});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MutMap(y.mutable_data().data() + i * m * n, m, n).noalias() =
        detail::ConstMap(a.data().data() + i * m * k, m, k) * detail::ConstMap(b.data().data() + i * k * n, k, n);
  }
  if (tape.tracks({&a, &b})) {
    tape.record("bmm", {a, b}, y, [a, b, batch, m, k, n](std::span<const double> g) mutable {
      for (std::size_t i = 0; i < batch; ++i) {
        detail::ConstMap G(g.data() + i * m * n, m, n);
        if (a.requires_grad()) {
          detail::MutMap(a.grad_accumulator().data() + i * m * k, m, k).noalias() +=
              G * detail::ConstMap(b.data().data() + i * k * n, k, n).transpose();
        }
        if (b.requires_grad()) {
          detail::MutMap(b.grad_accumulator().data() + i * k * n, k, n).noalias() +=
              detail::ConstMap(a.data().data() + i * m * k, m, k).transpose() * G;
        }
      }
    });
  }
  return y;
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose(Tape& tape, const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("transpose: expected rank 2 or 3, got " + to_string(x.shape()));
  }
  const std::size_t batch = x.rank() == 3 ? x.extent(0) : 1;
  const std::size_t r = x.extent(x.rank() - 2);
  const std::size_t c = x.extent(x.rank() - 1);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor y = Tensor::zeros(out_shape);
  auto ys = y.mutable_data();
  const auto xs = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ys[b * r * c + j * r + i] = xs[b * r * c + i * c + j];
    }
  }
  if (tape.tracks({&x})) {
    tape.record("transpose", {x}, y, [x, batch, r, c](std::span<const double> g) mutable {
      auto gx = x.grad_accumulator();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gx[b * r * c + i * c + j] += g[b * r * c + j * r + i];
        }
      }
    });
  }
  return y;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor y(std::move(shape), {x.data().begin(), x.data().end()});
  if (tape.tracks({&x})) {
    tape.record("reshape", {x}, y, [x](std::span<const double> g) mutable {
      auto gx = x.grad_accumulator();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

/// Concatenates along `axis`; all other extents must agree.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range for " + to_string(out_shape));
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    Shape expect = parts.front().shape();
    if (s.size() != expect.size()) throw ShapeError("concat: rank mismatch " + to_string(s));
    s[axis] = expect[axis] = 0;
    if (s != expect) {
      throw ShapeError("concat: incompatible shapes " + to_string(parts.front().shape()) + " and " +
                       to_string(p.shape()));
    }
    out_shape[axis] += p.extent(axis);
  }
  const auto split = detail::split_axis(out_shape, axis, "concat");
  Tensor y = Tensor::zeros(out_shape);
  auto ys = y.mutable_data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t chunk = p.extent(axis) * split.inner;
    const auto ps = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(ps.begin() + o * chunk, chunk, ys.begin() + o * split.n * split.inner + offset);
    }
    offsets.push_back(offset);
    offset += chunk;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape.recording() && any) {
    tape.record("concat", parts, y, [parts, offsets, split, axis](std::span<const double> g) mutable {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        auto gp = parts[k].grad_accumulator();
        const std::size_t chunk = parts[k].extent(axis) * split.inner;
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = g.data() + o * split.n * split.inner + offsets[k];
          for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += src[i];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Masked softmax and reductions

/// Softmax along `axis` restricted to valid entries; masked outputs are 0.
/// Stabilized by subtracting the per-slice valid maximum.
inline Tensor masked_softmax(Tape& tape, const Tensor& x, const std::optional<Mask>& mask, std::size_t axis) {
  const auto split = detail::split_axis(x.shape(), axis, "masked_softmax");
  std::vector<std::uint8_t> valid =
      mask ? detail::expand_mask(*mask, x.shape(), "masked_softmax") : std::vector<std::uint8_t>(x.size(), 1);
  const auto xs = x.data();
  Tensor y = Tensor::zeros(x.shape());
  auto ys = y.mutable_data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t in = 0; in < split.inner; ++in) {
      const std::size_t base = o * split.n * split.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < split.n; ++j) {
        const std::size_t i = base + j * split.inner;
        if (valid[i]) {
          mx = std::max(mx, xs[i]);
          any = true;
        }
      }
      if (!any) {
        throw DomainError("masked_softmax: slice " + std::to_string(o * split.inner + in) +
                          " has no valid entries");
      }
      double total = 0.0;
      for (std::size_t j = 0; j < split.n; ++j) {
        const std::size_t i = base + j * split.inner;
        if (valid[i]) {
          ys[i] = std::exp(xs[i] - mx);
          total += ys[i];
        }
      }
      for (std::size_t j = 0; j < split.n; ++j) ys[base + j * split.inner] /= total;
    }
  }
  if (tape.tracks({&x})) {
    tape.record("masked_softmax", {x}, y, [x, y, split](std::span<const double> g) mutable {
      auto gx = x.grad_accumulator();
      const auto ys = y.data();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t in = 0; in < split.inner; ++in) {
          const std::size_t base = o * split.n * split.inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < split.n; ++j) {
            const std::size_t i = base + j * split.inner;
            dot += ys[i] * g[i];
          }
          // Masked entries have y = 0 and therefore receive no gradient.
          for (std::size_t j = 0; j < split.n; ++j) {
            const std::size_t i = base + j * split.inner;
            gx[i] += ys[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return y;
}

enum class ReduceKind { sum, mean, max, lse };

inline std::string_view to_string(ReduceKind kind) {
  switch (kind) {
    case ReduceKind::sum: return "sum";
    case ReduceKind::mean: return "mean";
    case ReduceKind::max: return "max";
    case ReduceKind::lse: return "lse";
  }
  return "?";
}

/// Reduces `axis` away (a rank-1 input gives shape [1]). Masked entries
/// contribute nothing; max routes its gradient to the lowest-index maximum.
inline Tensor reduce(Tape& tape, ReduceKind kind, const Tensor& x, std::size_t axis,
                     const std::optional<Mask>& mask = std::nullopt) {
  const auto split = detail::split_axis(x.shape(), axis, "reduce");
  std::vector<std::uint8_t> valid =
      mask ? detail::expand_mask(*mask, x.shape(), "reduce") : std::vector<std::uint8_t>(x.size(), 1);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  const std::size_t slices = split.outer * split.inner;
  const auto xs = x.data();
  Tensor y = Tensor::zeros(out_shape);
  auto ys = y.mutable_data();
  // Per-slice auxiliary value: valid count (mean) or arg-max flat index (max).
  auto aux = std::make_shared<std::vector<std::size_t>>(slices, 0);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t in = 0; in < split.inner; ++in) {
      const std::size_t s = o * split.inner + in;
      const std::size_t base = o * split.n * split.inner + in;
      std::size_t count = 0;
      std::size_t arg = 0;
      double mx = -std::numeric_limits<double>::infinity();
      double total = 0.0;
      for (std::size_t j = 0; j < split.n; ++j) {
        const std::size_t i = base + j * split.inner;
        if (!valid[i]) continue;
        ++count;
        total += xs[i];
        if (xs[i] > mx) {
          mx = xs[i];
          arg = i;
        }
      }
      if (count == 0) throw DomainError("reduce: slice " + std::to_string(s) + " has no valid entries");
      switch (kind) {
        case ReduceKind::sum: ys[s] = total; break;
        case ReduceKind::mean:
          ys[s] = total / static_cast<double>(count);
          (*aux)[s] = count;
          break;
        case ReduceKind::max:
          ys[s] = mx;
          (*aux)[s] = arg;
          break;
        case ReduceKind::lse: {
          double acc = 0.0;
          for (std::size_t j = 0; j < split.n; ++j) {
            const std::size_t i = base + j * split.inner;
            if (valid[i]) acc += std::exp(xs[i] - mx);
          }
          ys[s] = mx + std::log(acc);
          break;
        }
      }
    }
  }
  if (tape.tracks({&x})) {
    auto valid_ptr = std::make_shared<const std::vector<std::uint8_t>>(std::move(valid));
    tape.record(std::string("reduce_") + std::string(to_string(kind)), {x}, y,
                [x, y, kind, split, aux, valid_ptr](std::span<const double> g) mutable {
                  auto gx = x.grad_accumulator();
                  const auto xs = x.data();
                  const auto ys = y.data();
                  const auto& v = *valid_ptr;
                  for (std::size_t o = 0; o < split.outer; ++o) {
                    for (std::size_t in = 0; in < split.inner; ++in) {
                      const std::size_t s = o * split.inner + in;
                      const std::size_t base = o * split.n * split.inner + in;
                      if (kind == ReduceKind::max) {
                        gx[(*aux)[s]] += g[s];
                        continue;
                      }
                      for (std::size_t j = 0; j < split.n; ++j) {
                        const std::size_t i = base + j * split.inner;
                        if (!v[i]) continue;
                        switch (kind) {
                          case ReduceKind::sum: gx[i] += g[s]; break;
                          case ReduceKind::mean: gx[i] += g[s] / static_cast<double>((*aux)[s]); break;
                          case ReduceKind::lse: gx[i] += g[s] * std::exp(xs[i] - ys[s]); break;
                          case ReduceKind::max: break;
                        }
                      }
                    }
                  }
                });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Layer normalization and embedding lookup

/// Normalizes over the last axis: gain * (x - mean) / sqrt(var + eps) + bias,
/// with the population variance.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.extent(x.rank() - 1);
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain " + to_string(gain.shape()) + " / bias " + to_string(bias.shape()) +
                     " do not match feature extent of " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  const auto xs = x.data();
  const auto gs = gain.data();
  const auto bs = bias.data();
  auto normalized = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor y = Tensor::zeros(x.shape());
  auto ys = y.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + epsilon);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * is;
      (*normalized)[r * d + j] = xh;
      ys[r * d + j] = gs[j] * xh + bs[j];
    }
  }
  if (tape.tracks({&x, &gain, &bias})) {
    tape.record("layer_norm", {x, gain, bias}, y,
                [x, gain, bias, normalized, inv_std, rows, d](std::span<const double> g) mutable {
                  const auto gs = gain.data();
                  const auto& xh = *normalized;
                  if (gain.requires_grad()) {
                    auto gg = gain.grad_accumulator();
                    for (std::size_t i = 0; i < rows * d; ++i) gg[i % d] += g[i] * xh[i];
                  }
                  if (bias.requires_grad()) {
                    auto gb = bias.grad_accumulator();
                    for (std::size_t i = 0; i < rows * d; ++i) gb[i % d] += g[i];
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad_accumulator();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dxh = 0.0;
                      double mean_dxh_xh = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[r * d + j] * gs[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[r * d + j];
                      }
                      mean_dxh *= inv_d;
                      mean_dxh_xh *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[r * d + j] * gs[j];
                        gx[r * d + j] += (*inv_std)[r] * (dxh - mean_dxh - xh[r * d + j] * mean_dxh_xh);
                      }
                    }
                  }
                });
  }
  return y;
}

/// Row lookup; the backward pass scatter-adds, so repeated indices accumulate.
inline Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + to_string(table.shape()));
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t v = table.extent(0);
  const std::size_t d = table.extent(1);
  for (std::size_t idx : indices) {
    if (idx >= v) {
      throw DomainError("gather_rows: index " + std::to_string(idx) + " out of range [0, " + std::to_string(v) +
                        ")");
    }
  }
  Tensor y = Tensor::zeros({indices.size(), d});
  auto ys = y.mutable_data();
  const auto ts = table.data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(ts.begin() + indices[r] * d, d, ys.begin() + r * d);
  }
  if (tape.tracks({&table})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape.record("gather_rows", {table}, y, [table, idx = std::move(idx), d](std::span<const double> g) mutable {
      auto gt = table.grad_accumulator();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += g[r * d + j];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Parameters and gradient checking

struct Parameter {
  std::string name;
  Tensor value;
  /// Rows (of a rank-2 tensor) that the optimizer must never change.
  std::vector<std::size_t> frozen_rows;
};

class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor value, std::vector<std::size_t> frozen_rows = {}) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    entries_.push_back(Parameter{std::move(name), std::move(value), std::move(frozen_rows)});
    return entries_.back().value;
  }

  bool contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Parameter& p) { return p.name == name; });
  }

  const Tensor& at(std::string_view name) const {
    for (const auto& p : entries_) {
      if (p.name == name) return p.value;
    }
    throw ConfigError("no parameter named '" + std::string(name) + "'");
  }
  Tensor& at(std::string_view name) {
    return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(name));
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Deep copy; the result shares no storage with this set.
  ParameterSet clone() const {
    ParameterSet out;
    for (const auto& p : entries_) out.entries_.push_back(Parameter{p.name, p.value.clone(), p.frozen_rows});
    return out;
  }

  void zero_grad() {
    for (auto& p : entries_) p.value.zero_grad();
  }

  bool all_finite() const {
    return std::all_of(entries_.begin(), entries_.end(), [](const Parameter& p) {
      return std::all_of(p.value.data().begin(), p.value.data().end(), [](double v) { return std::isfinite(v); });
    });
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : entries_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter> entries_;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Relative errors are measured against max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-4;
  std::string corrupt_op;  // forwarded to Tape::Options for negative controls
};

struct GradcheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 0.0;
  bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
  }
};

/// Compares backward() gradients of every trainable parameter against
/// central differences of `builder`, which must build a scalar loss on the
/// supplied tape from the current parameter values.
inline GradcheckReport gradcheck(const std::function<Tensor(Tape&)>& builder, ParameterSet& params,
                                 const GradcheckOptions& options = {}) {
  auto evaluate = [&] {
    Tape tape = Tape::no_grad();
    return builder(tape).item();
  };
  const double first = evaluate();
  const double second = evaluate();
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw NumericError("gradcheck: builder is not deterministic (two forward passes disagree)");
  }

  params.zero_grad();
  {
    Tape tape(Tape::Options{.recording = true, .corrupt_op = options.corrupt_op});
    Tensor loss = builder(tape);
    backward(loss, tape);
  }

  GradcheckReport report;
  report.tolerance = options.tolerance;
  for (auto& p : params) {
    if (!p.value.requires_grad()) continue;
    std::vector<double> analytic(p.value.size(), 0.0);
    if (p.value.has_grad()) std::copy(p.value.grad().begin(), p.value.grad().end(), analytic.begin());
    auto values = p.value.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double up = evaluate();
      values[i] = saved - options.step;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.denominator_floor});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.entries.push_back(GradcheckEntry{p.name, worst, worst <= options.tolerance});
  }
  params.zero_grad();
  return report;
}

}  // namespace amil::autograd
