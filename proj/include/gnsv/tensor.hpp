// Copyright (c) 2026 The gnsv authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef GNSV_TENSOR_HPP_
#define GNSV_TENSOR_HPP_

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gnsv {

using Shape = std::vector<int>;

inline int NumelOf(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string ShapeStr(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

enum class Mode { kTrain, kEval };

// Dense row-major storage shared by tensor handles. A handle owns a shape;
// reshaped views alias the same storage.
struct TensorStorage {
  std::vector<double> data;
  std::vector<double> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : shape_(std::move(shape)), st_(std::make_shared<TensorStorage>()) {
    st_->data.assign(static_cast<size_t>(NumelOf(shape_)), 0.0);
    if (requires_grad) SetRequiresGrad(true);
  }

  static Tensor Zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor Full(Shape shape, double value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (double& v : t.st_->data) v = value;
    return t;
  }

  static Tensor FromData(Shape shape, std::vector<double> values,
                         bool requires_grad = false) {
    if (static_cast<int>(values.size()) != NumelOf(shape)) {
      throw std::invalid_argument("FromData: " + std::to_string(values.size()) +
                                  " values for shape " + ShapeStr(shape));
    }
    Tensor t(std::move(shape), requires_grad);
    t.st_->data = std::move(values);
    return t;
  }

  static Tensor Uniform(Shape shape, double lo, double hi,
                        std::mt19937_64& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.st_->data) v = dist(rng);
    return t;
  }

  static Tensor Gaussian(Shape shape, double mean, double stddev,
                         std::mt19937_64& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : t.st_->data) v = dist(rng);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int numel() const { return NumelOf(shape_); }

  double* data() { return st_->data.data(); }
  const double* data() const { return st_->data.data(); }
  double* grad() { return st_->grad.data(); }
  const double* grad() const { return st_->grad.data(); }

  double& at(int i) { return st_->data[static_cast<size_t>(i)]; }
  double at(int i) const { return st_->data[static_cast<size_t>(i)]; }
  double& at(int r, int c) {
    return st_->data[static_cast<size_t>(r) * dim(1) + c];
  }
  double at(int r, int c) const {
    return st_->data[static_cast<size_t>(r) * dim(1) + c];
  }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item: tensor " + ShapeStr(shape_) +
                                  " is not scalar");
    }
    return st_->data[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }

  void SetRequiresGrad(bool on) {
    st_->requires_grad = on;
    if (on) {
      st_->grad.assign(st_->data.size(), 0.0);
    } else {
      st_->grad.clear();
    }
  }

  void ZeroGrad() {
    if (requires_grad()) st_->grad.assign(st_->data.size(), 0.0);
  }

  // Same storage, new shape. Gradients alias too.
  Tensor Reshaped(Shape shape) const {
    if (NumelOf(shape) != numel()) {
      throw std::invalid_argument("Reshaped: cannot view " + ShapeStr(shape_) +
                                  " as " + ShapeStr(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.st_ = st_;
    return t;
  }

  Tensor Clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.st_ = std::make_shared<TensorStorage>(*st_);
    return t;
  }

  bool SameStorage(const Tensor& other) const { return st_ == other.st_; }

  bool AllFinite() const {
    for (double v : st_->data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  const std::shared_ptr<TensorStorage>& storage() const { return st_; }

 private:
  Shape shape_;
  std::shared_ptr<TensorStorage> st_;
};

// Reverse-mode tape. Forward ops append one node each; Backward replays the
// recorded rules in reverse. Gradients of op outputs are cleared before each
// replay, so leaf gradients accumulate across Backward calls until explicitly
// zeroed.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  void Reset() { nodes_.clear(); }

  void Record(std::shared_ptr<TensorStorage> out,
              std::function<void()> backward) {
    nodes_.push_back(Node{std::move(out), std::move(backward)});
  }

  void Backward(const Tensor& root) {
    if (root.numel() != 1) {
      throw std::invalid_argument("Backward: root " + ShapeStr(root.shape()) +
                                  " is not scalar");
    }
    if (!root.requires_grad()) {
      throw std::invalid_argument("Backward: root tensor is not tracked");
    }
    for (Node& n : nodes_) {
      if (n.out->requires_grad) n.out->grad.assign(n.out->data.size(), 0.0);
    }
    root.storage()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->backward();
    }
  }

 private:
  struct Node {
    std::shared_ptr<TensorStorage> out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

namespace detail {

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using ConstMapMat = Eigen::Map<const EMat>;

inline ConstMapMat MatView(const Tensor& t, int rows, int cols) {
  return ConstMapMat(t.data(), rows, cols);
}

inline MapMat GradView(Tensor& t, int rows, int cols) {
  return MapMat(t.grad(), rows, cols);
}

inline bool TrackOutput(const Tape& tape, std::initializer_list<Tensor> ins) {
  if (!tape.recording()) return false;
  for (const Tensor& t : ins) {
    if (t.requires_grad()) return true;
  }
  return false;
}

inline void CheckSameShape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                ShapeStr(a.shape()) + " vs " +
                                ShapeStr(b.shape()));
  }
}

inline void CheckMatrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                ShapeStr(t.shape()));
  }
}

// sigmoid stable across the whole double range
inline double StableSigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operators. Each op validates shapes, computes the forward value and,
// when any input is tracked on a recording tape, registers a backward rule.
// ---------------------------------------------------------------------------

inline Tensor MatMul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::CheckMatrix("matmul", a);
  detail::CheckMatrix("matmul", b);
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions differ, " +
                                ShapeStr(a.shape()) + " vs " +
                                ShapeStr(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  {
    detail::MapMat o(out.data(), m, n);
    o.noalias() = detail::MatView(a, m, k) * detail::MatView(b, k, n);
  }
  if (detail::TrackOutput(tape, {a, b})) {
    out.SetRequiresGrad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.Record(out.storage(), [ac, bc, oc, m, k, n]() mutable {
      detail::ConstMapMat og(oc.grad(), m, n);
      if (ac.requires_grad()) {
        detail::GradView(ac, m, k).noalias() +=
            og * detail::MatView(bc, k, n).transpose();
      }
      if (bc.requires_grad()) {
        detail::GradView(bc, k, n).noalias() +=
            detail::MatView(ac, m, k).transpose() * og;
      }
    });
  }
  return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor BinaryPointwise(Tape& tape, const char* name, const Tensor& a,
                       const Tensor& b, Fwd fwd, Bwd bwd) {
  CheckSameShape(name, a, b);
  const int n = a.numel();
  Tensor out(a.shape());
  for (int i = 0; i < n; ++i) out.at(i) = fwd(a.at(i), b.at(i));
  if (TrackOutput(tape, {a, b})) {
    out.SetRequiresGrad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.Record(out.storage(), [ac, bc, oc, n, bwd]() mutable {
      for (int i = 0; i < n; ++i) {
        double ga, gb;
        bwd(ac.at(i), bc.at(i), oc.grad()[i], &ga, &gb);
        if (ac.requires_grad()) ac.grad()[i] += ga;
        if (bc.requires_grad()) bc.grad()[i] += gb;
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor UnaryPointwise(Tape& tape, const Tensor& x, Fwd fwd, Bwd bwd) {
  const int n = x.numel();
  Tensor out(x.shape());
  for (int i = 0; i < n; ++i) out.at(i) = fwd(x.at(i));
  if (TrackOutput(tape, {x})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, oc = out;
    tape.Record(out.storage(), [xc, oc, n, bwd]() mutable {
      for (int i = 0; i < n; ++i) {
        xc.grad()[i] += bwd(xc.at(i), oc.at(i)) * oc.grad()[i];
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor Add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::BinaryPointwise(
      tape, "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double* ga, double* gb) {
        *ga = g;
        *gb = g;
      });
}

inline Tensor Sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::BinaryPointwise(
      tape, "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double* ga, double* gb) {
        *ga = g;
        *gb = -g;
      });
}

inline Tensor Mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::BinaryPointwise(
      tape, "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double* ga, double* gb) {
        *ga = g * y;
        *gb = g * x;
      });
}

inline Tensor Sigmoid(Tape& tape, const Tensor& x) {
  return detail::UnaryPointwise(
      tape, x, [](double v) { return detail::StableSigmoid(v); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor Tanh(Tape& tape, const Tensor& x) {
  return detail::UnaryPointwise(
      tape, x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor Relu(Tape& tape, const Tensor& x) {
  return detail::UnaryPointwise(
      tape, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// Backward uses 1/(2*(y+eps)) so a zero-valued sqrt (clamped variance of
// identical frames) cannot emit an infinite gradient.
inline constexpr double kSqrtGradEpsilon = 1e-10;

inline Tensor Sqrt(Tape& tape, const Tensor& x) {
  return detail::UnaryPointwise(
      tape, x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / (y + kSqrtGradEpsilon); });
}

inline Tensor ClampMin(Tape& tape, const Tensor& x, double floor) {
  return detail::UnaryPointwise(
      tape, x, [floor](double v) { return v < floor ? floor : v; },
      [floor](double v, double) { return v >= floor ? 1.0 : 0.0; });
}

inline Tensor Scale(Tape& tape, const Tensor& x, double c) {
  return detail::UnaryPointwise(
      tape, x, [c](double v) { return c * v; },
      [c](double, double) { return c; });
}

// Row-broadcast bias add: x is T x D, bias holds D values.
inline Tensor AddRowVector(Tape& tape, const Tensor& x, const Tensor& bias) {
  detail::CheckMatrix("add_rowvec", x);
  const int rows = x.dim(0), cols = x.dim(1);
  if (bias.numel() != cols) {
    throw std::invalid_argument("add_rowvec: bias " + ShapeStr(bias.shape()) +
                                " does not match row width of " +
                                ShapeStr(x.shape()));
  }
  Tensor out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) out.at(r, c) = x.at(r, c) + bias.at(c);
  }
  if (detail::TrackOutput(tape, {x, bias})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, bc = bias, oc = out;
    tape.Record(out.storage(), [xc, bc, oc, rows, cols]() mutable {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          double g = oc.grad()[r * cols + c];
          if (xc.requires_grad()) xc.grad()[r * cols + c] += g;
          if (bc.requires_grad()) bc.grad()[c] += g;
        }
      }
    });
  }
  return out;
}

inline Tensor Sum(Tape& tape, const Tensor& x) {
  Tensor out({1});
  double s = 0.0;
  for (int i = 0; i < x.numel(); ++i) s += x.at(i);
  out.at(0) = s;
  if (detail::TrackOutput(tape, {x})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, oc = out;
    tape.Record(out.storage(), [xc, oc]() mutable {
      double g = oc.grad()[0];
      for (int i = 0; i < xc.numel(); ++i) xc.grad()[i] += g;
    });
  }
  return out;
}

// Mean over the elements of each row: T x D -> T.
inline Tensor RowMean(Tape& tape, const Tensor& x) {
  detail::CheckMatrix("row_mean", x);
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out({rows});
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += x.at(r, c);
    out.at(r) = s / cols;
  }
  if (detail::TrackOutput(tape, {x})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, oc = out;
    tape.Record(out.storage(), [xc, oc, rows, cols]() mutable {
      for (int r = 0; r < rows; ++r) {
        double g = oc.grad()[r] / cols;
        for (int c = 0; c < cols; ++c) xc.grad()[r * cols + c] += g;
      }
    });
  }
  return out;
}

// Max-subtraction stabilized softmax over a vector of frame logits.
inline Tensor SoftmaxOverFrames(Tape& tape, const Tensor& logits) {
  const int n = logits.numel();
  if (n == 0) {
    throw std::invalid_argument("softmax_over_frames: empty input");
  }
  if (logits.rank() == 2 && logits.dim(1) != 1) {
    throw std::invalid_argument(
        "softmax_over_frames: expected a frame vector, got " +
        ShapeStr(logits.shape()));
  }
  Tensor out(logits.shape());
  double mx = logits.at(0);
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits.at(i));
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    out.at(i) = std::exp(logits.at(i) - mx);
    z += out.at(i);
  }
  for (int i = 0; i < n; ++i) out.at(i) /= z;
  if (detail::TrackOutput(tape, {logits})) {
    out.SetRequiresGrad(true);
    Tensor xc = logits, oc = out;
    tape.Record(out.storage(), [xc, oc, n]() mutable {
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += oc.grad()[i] * oc.at(i);
      for (int i = 0; i < n; ++i) {
        xc.grad()[i] += oc.at(i) * (oc.grad()[i] - dot);
      }
    });
  }
  return out;
}

// Centered dilated context expansion: row t of the result concatenates the
// `width` input frames at offsets {t, t+dilation, ...}; with the output index
// shifted so taps sit symmetrically around the center frame.
inline Tensor FrameContext(Tape& tape, const Tensor& x, int width,
                           int dilation) {
  detail::CheckMatrix("frame_context", x);
  if (width < 1 || dilation < 1) {
    throw std::invalid_argument("frame_context: width and dilation must be >= 1");
  }
  const int t_in = x.dim(0), d = x.dim(1);
  const int span = (width - 1) * dilation;
  const int t_out = t_in - span;
  if (t_out < 1) {
    throw std::invalid_argument(
        "frame_context: sequence of " + std::to_string(t_in) +
        " frames is shorter than the receptive span; need at least " +
        std::to_string(span + 1));
  }
  Tensor out({t_out, width * d});
  for (int t = 0; t < t_out; ++t) {
    for (int w = 0; w < width; ++w) {
      const double* src = x.data() + static_cast<size_t>(t + w * dilation) * d;
      double* dst = out.data() + static_cast<size_t>(t) * (width * d) + w * d;
      for (int c = 0; c < d; ++c) dst[c] = src[c];
    }
  }
  if (detail::TrackOutput(tape, {x})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, oc = out;
    tape.Record(out.storage(), [xc, oc, t_out, width, d, dilation]() mutable {
      for (int t = 0; t < t_out; ++t) {
        for (int w = 0; w < width; ++w) {
          const double* g =
              oc.grad() + static_cast<size_t>(t) * (width * d) + w * d;
          double* dst =
              xc.grad() + static_cast<size_t>(t + w * dilation) * d;
          for (int c = 0; c < d; ++c) dst[c] += g[c];
        }
      }
    });
  }
  return out;
}

// Valid (no padding) dilated 1-D convolution: input T x Din with a kernel of
// shape {W, Din, Dout} and a Dout bias. Output length is T - (W-1)*dilation.
inline Tensor Conv1dDilated(Tape& tape, const Tensor& input,
                            const Tensor& kernel, const Tensor& bias,
                            int dilation) {
  detail::CheckMatrix("conv1d_dilated", input);
  if (kernel.rank() != 3) {
    throw std::invalid_argument("conv1d_dilated: kernel must be WxDinxDout, got " +
                                ShapeStr(kernel.shape()));
  }
  const int w = kernel.dim(0), din = kernel.dim(1), dout = kernel.dim(2);
  if (input.dim(1) != din) {
    throw std::invalid_argument("conv1d_dilated: input " +
                                ShapeStr(input.shape()) + " vs kernel " +
                                ShapeStr(kernel.shape()));
  }
  if (bias.numel() != dout) {
    throw std::invalid_argument("conv1d_dilated: bias " +
                                ShapeStr(bias.shape()) + " vs Dout " +
                                std::to_string(dout));
  }
  Tensor ctx = FrameContext(tape, input, w, dilation);
  Tensor flat = kernel.Reshaped({w * din, dout});
  return AddRowVector(tape, MatMul(tape, ctx, flat), bias);
}

inline Tensor CropRows(Tape& tape, const Tensor& x, int start, int count) {
  detail::CheckMatrix("crop_rows", x);
  const int rows = x.dim(0), cols = x.dim(1);
  if (start < 0 || count < 1 || start + count > rows) {
    throw std::invalid_argument("crop_rows: [" + std::to_string(start) + ", " +
                                std::to_string(start + count) +
                                ") out of range for " + ShapeStr(x.shape()));
  }
  Tensor out({count, cols});
  for (int r = 0; r < count; ++r) {
    for (int c = 0; c < cols; ++c) out.at(r, c) = x.at(start + r, c);
  }
  if (detail::TrackOutput(tape, {x})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, oc = out;
    tape.Record(out.storage(), [xc, oc, start, count, cols]() mutable {
      for (int r = 0; r < count; ++r) {
        for (int c = 0; c < cols; ++c) {
          xc.grad()[(start + r) * cols + c] += oc.grad()[r * cols + c];
        }
      }
    });
  }
  return out;
}

inline Tensor ConcatVectors(Tape& tape, const Tensor& a, const Tensor& b) {
  const int na = a.numel(), nb = b.numel();
  Tensor out({na + nb});
  for (int i = 0; i < na; ++i) out.at(i) = a.at(i);
  for (int i = 0; i < nb; ++i) out.at(na + i) = b.at(i);
  if (detail::TrackOutput(tape, {a, b})) {
    out.SetRequiresGrad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.Record(out.storage(), [ac, bc, oc, na, nb]() mutable {
      if (ac.requires_grad()) {
        for (int i = 0; i < na; ++i) ac.grad()[i] += oc.grad()[i];
      }
      if (bc.requires_grad()) {
        for (int i = 0; i < nb; ++i) bc.grad()[i] += oc.grad()[na + i];
      }
    });
  }
  return out;
}

// Stack N same-width vectors (or 1 x D rows) into an N x D matrix.
inline Tensor StackRows(Tape& tape, const std::vector<Tensor>& rows) {
  if (rows.empty()) {
    throw std::invalid_argument("stack_rows: no rows given");
  }
  const int cols = rows[0].numel();
  const int n = static_cast<int>(rows.size());
  Tensor out({n, cols});
  bool track = false;
  for (int r = 0; r < n; ++r) {
    if (rows[r].numel() != cols) {
      throw std::invalid_argument("stack_rows: row " + std::to_string(r) +
                                  " has " + std::to_string(rows[r].numel()) +
                                  " values, expected " + std::to_string(cols));
    }
    for (int c = 0; c < cols; ++c) out.at(r, c) = rows[r].at(c);
    track = track || rows[r].requires_grad();
  }
  if (tape.recording() && track) {
    out.SetRequiresGrad(true);
    std::vector<Tensor> rc = rows;
    Tensor oc = out;
    tape.Record(out.storage(), [rc, oc, n, cols]() mutable {
      for (int r = 0; r < n; ++r) {
        if (!rc[r].requires_grad()) continue;
        for (int c = 0; c < cols; ++c) {
          rc[r].grad()[c] += oc.grad()[r * cols + c];
        }
      }
    });
  }
  return out;
}

// Inverted dropout; identity when rate == 0 or in eval mode.
inline Tensor Dropout(Tape& tape, const Tensor& x, double rate, Mode mode,
                      std::mt19937_64* rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  }
  if (mode == Mode::kEval || rate == 0.0) return x;
  if (rng == nullptr) {
    throw std::invalid_argument("dropout: active dropout needs an RNG");
  }
  const int n = x.numel();
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  const double keep = 1.0 - rate;
  for (int i = 0; i < n; ++i) {
    (*mask)[i] = dist(*rng) < keep ? 1.0 / keep : 0.0;
  }
  Tensor out(x.shape());
  for (int i = 0; i < n; ++i) out.at(i) = x.at(i) * (*mask)[i];
  if (detail::TrackOutput(tape, {x})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, oc = out;
    tape.Record(out.storage(), [xc, oc, mask, n]() mutable {
      for (int i = 0; i < n; ++i) xc.grad()[i] += oc.grad()[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over the frame axis of a T x D activation.
// ---------------------------------------------------------------------------

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

struct BatchNormParams {
  Tensor scale;         // gamma, learnable
  Tensor shift;         // beta, learnable
  Tensor running_mean;  // updated in train mode, used in eval mode
  Tensor running_var;
};

inline BatchNormParams MakeBatchNormParams(int dim) {
  BatchNormParams p;
  p.scale = Tensor::Full({dim}, 1.0, /*requires_grad=*/true);
  p.shift = Tensor::Zeros({dim}, /*requires_grad=*/true);
  p.running_mean = Tensor::Zeros({dim});
  p.running_var = Tensor::Full({dim}, 1.0);
  return p;
}

// Train mode normalizes with the batch's population statistics and folds them
// into the running estimates; eval mode normalizes with the running estimates.
inline Tensor BatchNorm(Tape& tape, const Tensor& x, BatchNormParams& params,
                        Mode mode) {
  detail::CheckMatrix("batch_norm", x);
  const int rows = x.dim(0), cols = x.dim(1);
  if (params.scale.numel() != cols) {
    throw std::invalid_argument("batch_norm: params sized " +
                                ShapeStr(params.scale.shape()) + " vs input " +
                                ShapeStr(x.shape()));
  }
  if (mode == Mode::kTrain && rows < 2) {
    throw std::invalid_argument(
        "batch_norm: train mode needs at least 2 frames, got " +
        std::to_string(rows));
  }

  Tensor out({rows, cols});
  auto mean = std::make_shared<std::vector<double>>(cols, 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(cols, 0.0);
  auto xhat = std::make_shared<std::vector<double>>(
      static_cast<size_t>(rows) * cols, 0.0);

  if (mode == Mode::kTrain) {
    for (int c = 0; c < cols; ++c) {
      double m = 0.0;
      for (int r = 0; r < rows; ++r) m += x.at(r, c);
      m /= rows;
      double v = 0.0;
      for (int r = 0; r < rows; ++r) {
        double d = x.at(r, c) - m;
        v += d * d;
      }
      v /= rows;
      (*mean)[c] = m;
      (*inv_std)[c] = 1.0 / std::sqrt(v + kBatchNormEpsilon);
      params.running_mean.at(c) =
          kBatchNormMomentum * params.running_mean.at(c) +
          (1.0 - kBatchNormMomentum) * m;
      params.running_var.at(c) = kBatchNormMomentum * params.running_var.at(c) +
                                 (1.0 - kBatchNormMomentum) * v;
    }
  } else {
    for (int c = 0; c < cols; ++c) {
      (*mean)[c] = params.running_mean.at(c);
      (*inv_std)[c] =
          1.0 / std::sqrt(params.running_var.at(c) + kBatchNormEpsilon);
    }
  }

  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double h = (x.at(r, c) - (*mean)[c]) * (*inv_std)[c];
      (*xhat)[static_cast<size_t>(r) * cols + c] = h;
      out.at(r, c) = params.scale.at(c) * h + params.shift.at(c);
    }
  }

  if (detail::TrackOutput(tape, {x, params.scale, params.shift})) {
    out.SetRequiresGrad(true);
    Tensor xc = x, sc = params.scale, sh = params.shift, oc = out;
    const bool train = mode == Mode::kTrain;
    tape.Record(out.storage(),
                [xc, sc, sh, oc, xhat, inv_std, rows, cols, train]() mutable {
      for (int c = 0; c < cols; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int r = 0; r < rows; ++r) {
          double dy = oc.grad()[r * cols + c];
          sum_dy += dy;
          sum_dy_xhat += dy * (*xhat)[static_cast<size_t>(r) * cols + c];
        }
        if (sc.requires_grad()) sc.grad()[c] += sum_dy_xhat;
        if (sh.requires_grad()) sh.grad()[c] += sum_dy;
        if (!xc.requires_grad()) continue;
        double gamma = sc.at(c), is = (*inv_std)[c];
        for (int r = 0; r < rows; ++r) {
          double dy = oc.grad()[r * cols + c];
          double h = (*xhat)[static_cast<size_t>(r) * cols + c];
          if (train) {
            xc.grad()[r * cols + c] +=
                gamma * is *
                (dy - sum_dy / rows - h * sum_dy_xhat / rows);
          } else {
            xc.grad()[r * cols + c] += gamma * is * dy;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace gnsv

#endif  // GNSV_TENSOR_HPP_
