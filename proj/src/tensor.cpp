#include "mtci/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "mtci/error.hpp"

namespace mtci {

namespace detail {

struct Node {
  std::string op;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardRule rule;

  bool is_leaf() const { return inputs.empty(); }
};

}  // namespace detail

using detail::Node;

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, data has " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0.0);
  return node;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

thread_local BranchProbe* active_probe = nullptr;

}  // namespace

BranchProbe::BranchProbe() : outer_(active_probe) { active_probe = this; }
BranchProbe::~BranchProbe() { active_probe = outer_; }

Tensor::Tensor() : node_(make_leaf({}, {0.0}, false)) {}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({}, {value}, requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf()) throw Error("mutable_data() on non-leaf tensor produced by " + node_->op);
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_to_string(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->is_leaf(); }
std::string_view Tensor::op() const { return node_->op; }
std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

void Tensor::backward() const { mtci::backward(*this); }

Tensor make_op(std::string name, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
               BackwardRule rule) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError(name + ": value length does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->op = std::move(name);
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    node->requires_grad = node->requires_grad || in.requires_grad();
    node->inputs.push_back(std::move(in.node_));
  }
  if (node->requires_grad) {
    node->grad.assign(node->value.size(), 0.0);
    node->rule = std::move(rule);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward() needs a single-element root, got " +
                     shape_to_string(root.shape()));
  }
  Node* start = root.node_.get();
  if (!start->requires_grad) return;

  // Iterative post-order DFS; `order` ends up with inputs before consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{start, 0}};
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Each pass accumulates into zeroed buffers; leaves then add the pass total
  // to what they held before, so repeating a pass scales leaf grads exactly.
  std::vector<std::vector<double>> prior;
  for (Node* n : order) {
    if (n->is_leaf()) prior.push_back(n->grad);
    std::fill(n->grad.begin(), n->grad.end(), 0.0);
  }
  start->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    BackwardContext ctx;
    ctx.grad_out = n->grad;
    ctx.out = n->value;
    ctx.in.reserve(n->inputs.size());
    ctx.in_grad.reserve(n->inputs.size());
    for (auto& in : n->inputs) {
      ctx.in.emplace_back(in->value);
      ctx.in_grad.emplace_back(in->requires_grad ? std::span<double>(in->grad)
                                                 : std::span<double>());
    }
    n->rule(ctx);
  }

  std::size_t k = 0;
  for (Node* n : order) {
    if (!n->is_leaf()) continue;
    const auto& before = prior[k++];
    for (std::size_t i = 0; i < before.size(); ++i) n->grad[i] = before[i] + n->grad[i];
  }
}

// ---------------------------------------------------------------------------
// Element-wise operations

Tensor apply_binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul"};
  const char* name = names[static_cast<int>(op)];
  const bool a_scalar = a.rank() == 0;
  const bool b_scalar = b.rank() == 0;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto da = a.data();
  auto db = b.data();
  auto at = [](std::span<const double> v, bool bcast, std::size_t i) { return bcast ? v[0] : v[i]; };

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = at(da, a_scalar, i);
    const double y = at(db, b_scalar, i);
    switch (op) {
      case BinaryOp::add: out[i] = x + y; break;
      case BinaryOp::sub: out[i] = x - y; break;
      case BinaryOp::mul: out[i] = x * y; break;
    }
  }

  return make_op(name, out_shape, std::move(out), {a, b},
                 [op, a_scalar, b_scalar, n, at](const BackwardContext& c) {
                   auto& ga = c.in_grad[0];
                   auto& gb = c.in_grad[1];
                   for (std::size_t i = 0; i < n; ++i) {
                     const double g = c.grad_out[i];
                     double wa = 1.0, wb = 1.0;
                     if (op == BinaryOp::sub) wb = -1.0;
                     if (op == BinaryOp::mul) {
                       wa = at(c.in[1], b_scalar, i);
                       wb = at(c.in[0], a_scalar, i);
                     }
                     if (!ga.empty()) ga[a_scalar ? 0 : i] += wa * g;
                     if (!gb.empty()) gb[b_scalar ? 0 : i] += wb * g;
                   }
                 });
}

Tensor apply_unary(UnaryOp op, const Tensor& x) {
  static constexpr const char* names[] = {"relu", "sigmoid", "softplus", "abs"};
  const std::size_t n = x.numel();
  auto in = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = in[i];
    switch (op) {
      case UnaryOp::relu: out[i] = v > 0 ? v : 0.0; break;
      case UnaryOp::sigmoid: out[i] = stable_sigmoid(v); break;
      case UnaryOp::softplus: out[i] = stable_softplus(v); break;
      case UnaryOp::abs: out[i] = std::abs(v); break;
    }
  }
  if (op == UnaryOp::relu || op == UnaryOp::abs) {
    for (BranchProbe* p = active_probe; p; p = p->outer_) {
      for (std::size_t i = 0; i < n; ++i) {
        p->hash_ ^= static_cast<std::uint64_t>((in[i] > 0) + 2 * (in[i] < 0));
        p->hash_ *= 1099511628211ull;  // FNV-1a
      }
    }
  }
  return make_op(names[static_cast<int>(op)], x.shape(), std::move(out), {x},
                 [op, n](const BackwardContext& c) {
                   auto& gx = c.in_grad[0];
                   for (std::size_t i = 0; i < n; ++i) {
                     const double v = c.in[0][i];
                     double d = 0.0;
                     switch (op) {
                       case UnaryOp::relu: d = v > 0 ? 1.0 : 0.0; break;
                       case UnaryOp::sigmoid: d = c.out[i] * (1.0 - c.out[i]); break;
                       case UnaryOp::softplus: d = stable_sigmoid(v); break;
                       // subgradient 0 at the kink
                       case UnaryOp::abs: d = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); break;
                     }
                     gx[i] += d * c.grad_out[i];
                   }
                 });
}

Tensor scale(const Tensor& x, double factor) { return mul(x, Tensor::scalar(factor)); }

// ---------------------------------------------------------------------------
// Linear algebra and spatial operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible operands " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto A = a.data();
  auto B = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
    }
  }
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](const BackwardContext& c) {
    auto& A = c.in[0];
    auto& B = c.in[1];
    auto& G = c.grad_out;
    if (!c.in_grad[0].empty()) {  // dA = G . B^T
      auto& dA = c.in_grad[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          dA[i * k + p] += s;
        }
    }
    if (!c.in_grad[1].empty()) {  // dB = A^T . G
      auto& dB = c.in_grad[1];
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += A[i * k + p] * G[i * n + j];
          dB[p * n + j] += s;
        }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3) throw ShapeError("conv2d: input must be [C x H x W], got " + shape_to_string(x.shape()));
  if (weight.rank() != 4 || weight.shape()[2] != weight.shape()[3] ||
      (weight.shape()[2] != 1 && weight.shape()[2] != 3)) {
    throw ShapeError("conv2d: weight must be [C_out x C_in x k x k] with k in {1,3}, got " +
                     shape_to_string(weight.shape()));
  }
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t cout = weight.shape()[0], k = weight.shape()[2];
  if (weight.shape()[1] != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight " +
                     shape_to_string(weight.shape()) + " expects " +
                     std::to_string(weight.shape()[1]));
  }
  if (bias.shape() != Shape{cout}) {
    throw ShapeError("conv2d: bias " + shape_to_string(bias.shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  }
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);

  // Visits every (out, in, weight) index triple touched by the convolution.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((o * cin + ci) * k + ky) * k + kx;
            for (long y = 0; y < H; ++y) {
              const long iy = y + static_cast<long>(ky) - pad;
              if (iy < 0 || iy >= H) continue;
              for (long xx = 0; xx < W; ++xx) {
                const long ix = xx + static_cast<long>(kx) - pad;
                if (ix < 0 || ix >= W) continue;
                fn((o * h + y) * w + xx, (ci * h + iy) * w + ix, widx);
              }
            }
          }
  };

  auto X = x.data();
  auto Wt = weight.data();
  auto Bs = bias.data();
  std::vector<double> out(cout * h * w);
  for (std::size_t o = 0; o < cout; ++o)
    std::fill_n(out.begin() + static_cast<long>(o * h * w), h * w, Bs[o]);
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += Wt[wi] * X[ii]; });

  return make_op("conv2d", {cout, h, w}, std::move(out), {x, weight, bias},
                 [for_each_tap, cout, h, w](const BackwardContext& c) {
                   auto& G = c.grad_out;
                   auto& dX = c.in_grad[0];
                   auto& dW = c.in_grad[1];
                   auto& dB = c.in_grad[2];
                   if (!dX.empty() || !dW.empty()) {
                     for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
                       if (!dX.empty()) dX[ii] += c.in[1][wi] * G[oi];
                       if (!dW.empty()) dW[wi] += c.in[0][ii] * G[oi];
                     });
                   }
                   if (!dB.empty()) {
                     for (std::size_t o = 0; o < cout; ++o)
                       for (std::size_t i = 0; i < h * w; ++i) dB[o] += G[o * h * w + i];
                   }
                 });
}

Tensor avg_pool2d_3x3(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("avg_pool2d_3x3: input must be [C x H x W], got " + shape_to_string(x.shape()));
  }
  const std::size_t ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t c = 0; c < ch; ++c)
      for (long y = 0; y < H; ++y)
        for (long xx = 0; xx < W; ++xx)
          for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx) {
              const long iy = y + dy, ix = xx + dx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              fn((c * h + y) * w + xx, (c * h + iy) * w + ix);
            }
  };
  auto X = x.data();
  std::vector<double> out(x.numel(), 0.0);
  for_each_tap([&](std::size_t oi, std::size_t ii) { out[oi] += X[ii]; });
  for (auto& v : out) v /= 9.0;
  return make_op("avg_pool2d_3x3", x.shape(), std::move(out), {x},
                 [for_each_tap](const BackwardContext& c) {
                   for_each_tap([&](std::size_t oi, std::size_t ii) {
                     c.in_grad[0][ii] += c.grad_out[oi] / 9.0;
                   });
                 });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("global_avg_pool: input must be [C x H x W], got " + shape_to_string(x.shape()));
  }
  const std::size_t ch = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  auto X = x.data();
  std::vector<double> out(ch, 0.0);
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += X[c * hw + i];
    out[c] = s / static_cast<double>(hw);
  }
  return make_op("global_avg_pool", {ch}, std::move(out), {x}, [ch, hw](const BackwardContext& c) {
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t ci = 0; ci < ch; ++ci)
      for (std::size_t i = 0; i < hw; ++i) c.in_grad[0][ci * hw + i] += c.grad_out[ci] * inv;
  });
}

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  if (xs.size() == 1) return xs[0];
  const Shape& first = xs[0].shape();
  if (first.empty()) throw ShapeError("concat_channels: rank-0 inputs have no channel axis");
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<std::size_t> sizes;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw ShapeError("concat_channels: extent mismatch " + shape_to_string(first) + " vs " +
                       shape_to_string(s));
    }
    out_shape[0] += s[0];
    sizes.push_back(t.numel());
  }
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (const auto& t : xs) out.insert(out.end(), t.data().begin(), t.data().end());
  return make_op("concat_channels", out_shape, std::move(out), {xs.begin(), xs.end()},
                 [sizes](const BackwardContext& c) {
                   std::size_t offset = 0;
                   for (std::size_t i = 0; i < sizes.size(); ++i) {
                     if (!c.in_grad[i].empty()) {
                       for (std::size_t j = 0; j < sizes[i]; ++j)
                         c.in_grad[i][j] += c.grad_out[offset + j];
                     }
                     offset += sizes[i];
                   }
                 });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.numel();
  return make_op("sum", {}, {s}, {x}, [n](const BackwardContext& c) {
    for (std::size_t i = 0; i < n; ++i) c.in_grad[0][i] += c.grad_out[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const std::size_t n = x.numel();
  return make_op("reshape", std::move(shape), std::move(out), {x}, [n](const BackwardContext& c) {
    for (std::size_t i = 0; i < n; ++i) c.in_grad[0][i] += c.grad_out[i];
  });
}

}  // namespace mtci
