#include "mtci/model.hpp"

#include <cmath>
#include <random>

#include "mtci/error.hpp"

namespace mtci {

namespace {

const char* task_name(std::size_t t) { return t == 0 ? "mu" : "sigma"; }

Conv make_conv(std::size_t out, std::size_t in, std::size_t k) {
  return {Tensor::zeros({out, in, k, k}, true), Tensor::zeros({out}, true)};
}

Dense make_dense(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({1, out}, true)};
}

// Calls fn(name, tensor) for every parameter in the canonical order.
template <typename P, typename Fn>
void visit(P& p, Fn&& fn) {
  auto conv = [&](const std::string& prefix, auto& c) {
    fn(prefix + ".weight", c.weight);
    fn(prefix + ".bias", c.bias);
  };
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const std::string block = "block" + std::to_string(b);
    for (std::size_t s = 0; s < kStreams; ++s)
      conv(block + ".stream" + std::to_string(s), p.blocks[b].streams[s]);
    for (std::size_t s = 0; s < kStreams; ++s)
      for (std::size_t t = 0; t < kTasks; ++t) {
        const std::string mask =
            block + ".stream" + std::to_string(s) + ".mask_" + task_name(t);
        conv(mask + ".reduce", p.blocks[b].masks[s][t].reduce);
        conv(mask + ".expand", p.blocks[b].masks[s][t].expand);
      }
  }
  for (std::size_t l = 0; l < kFcLayers; ++l) conv("fc" + std::to_string(l), p.fc[l]);
  for (std::size_t t = 0; t < kTasks; ++t)
    for (std::size_t l = 0; l < kFcLayers; ++l)
      conv(std::string("fc") + std::to_string(l) + ".mask_" + task_name(t), p.fc_masks[t][l]);
  for (std::size_t t = 0; t < kTasks; ++t) conv(std::string("head_") + task_name(t), p.heads[t]);
}

Tensor dense(const Dense& d, const Tensor& x) { return matmul(x, d.weight) + d.bias; }

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v < 1) throw ConfigError(field, "must be >= 1");
  };
  positive(n_blocks, "n_blocks");
  positive(in_channels, "in_channels");
  positive(spatial, "spatial");
  positive(stream_out_channels, "stream_out_channels");
  positive(attn_hidden_channels, "attn_hidden_channels");
  for (auto f : fc_sizes) positive(f, "fc_sizes");
  if (!std::isfinite(mu_offset)) throw ConfigError("mu_offset", "must be finite");
}

ModelConfig ModelConfig::toy() {
  ModelConfig cfg;
  cfg.n_blocks = 2;
  cfg.in_channels = 8;
  cfg.spatial = 5;
  cfg.stream_out_channels = 8;
  cfg.attn_hidden_channels = 4;
  cfg.fc_sizes = {16, 16, 16};
  return cfg;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t C = cfg.in_channels, S = cfg.stream_out_channels, A = cfg.attn_hidden_channels;
  const std::size_t B = cfg.n_blocks, D = cfg.head_input_size();
  const auto& F = cfg.fc_sizes;
  const std::size_t per_block = (11 * C * S + 3 * S) + 6 * (2 * S * A + A + S);
  const std::size_t fc = D * F[0] + F[0] + F[0] * F[1] + F[1] + F[1] * F[2] + F[2];
  std::size_t head_masks = 0;
  for (auto f : F) head_masks += 2 * (f * f + f);
  return B * per_block + fc + head_masks + 2 * (F[2] + 1);
}

Parameters::Named Parameters::named() const {
  Named out;
  visit(*this, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::size_t Parameters::count() const {
  std::size_t n = 0;
  visit(*this, [&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

void Parameters::zero_grad() {
  visit(*this, [](const std::string&, Tensor& t) { t.zero_grad(); });
}

Parameters Parameters::clone() const {
  Parameters copy = *this;
  visit(copy, [](const std::string&, Tensor& t) {
    t = Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()}, true);
  });
  return copy;
}

Parameters init_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.in_channels, S = cfg.stream_out_channels, A = cfg.attn_hidden_channels;
  Parameters p;
  p.blocks.resize(cfg.n_blocks);
  for (auto& block : p.blocks) {
    block.streams = {make_conv(S, C, 1), make_conv(S, C, 3), make_conv(S, C, 1)};
    for (auto& per_stream : block.masks)
      for (auto& mask : per_stream) mask = {make_conv(A, S, 1), make_conv(S, A, 1)};
  }
  std::size_t in = cfg.head_input_size();
  for (std::size_t l = 0; l < kFcLayers; ++l) {
    const std::size_t out = cfg.fc_sizes[l];
    p.fc[l] = make_dense(in, out);
    for (std::size_t t = 0; t < kTasks; ++t) p.fc_masks[t][l] = make_dense(out, out);
    in = out;
  }
  for (auto& head : p.heads) head = make_dense(in, 1);

  std::mt19937_64 rng(cfg.seed);
  visit(p, [&](const std::string& name, Tensor& t) {
    if (name.ends_with(".bias")) return;
    const auto& s = t.shape();
    const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.mutable_data()) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
      v = (2.0 * u - 1.0) * bound;
    }
  });
  return p;
}

StreamOutputs lmlsp_forward(const Parameters& params, const ModelConfig& cfg,
                            std::size_t block_index, const Tensor& x) {
  if (block_index >= params.blocks.size()) {
    throw ShapeError("lmlsp_forward: block " + std::to_string(block_index) + " of " +
                     std::to_string(params.blocks.size()));
  }
  const Shape expected{cfg.in_channels, cfg.spatial, cfg.spatial};
  if (x.shape() != expected) {
    throw ShapeError("lmlsp_forward: block " + std::to_string(block_index) + " expects " +
                     shape_to_string(expected) + ", got " + shape_to_string(x.shape()));
  }
  const auto& block = params.blocks[block_index];
  StreamOutputs out;
  out.shared[0] = relu(conv2d(x, block.streams[0].weight, block.streams[0].bias));
  out.shared[1] = relu(conv2d(x, block.streams[1].weight, block.streams[1].bias));
  out.shared[2] = relu(conv2d(avg_pool2d_3x3(x), block.streams[2].weight, block.streams[2].bias));
  for (std::size_t s = 0; s < kStreams; ++s) {
    for (std::size_t t = 0; t < kTasks; ++t) {
      const auto& net = block.masks[s][t];
      const Tensor hidden = relu(conv2d(out.shared[s], net.reduce.weight, net.reduce.bias));
      out.masks[t][s] = sigmoid(conv2d(hidden, net.expand.weight, net.expand.bias));
      out.task[t][s] = out.masks[t][s] * out.shared[s];
    }
  }
  return out;
}

BlockFeatures block_features(const StreamOutputs& streams) {
  return {global_avg_pool(concat_channels(streams.task[0])),
          global_avg_pool(concat_channels(streams.task[1])),
          global_avg_pool(concat_channels(streams.shared))};
}

ForwardResult forward(const Parameters& params, const ModelConfig& cfg,
                      std::span<const Tensor> blocks_input) {
  if (blocks_input.size() != cfg.n_blocks || params.blocks.size() != cfg.n_blocks) {
    throw ShapeError("forward: expected " + std::to_string(cfg.n_blocks) + " block inputs, got " +
                     std::to_string(blocks_input.size()));
  }
  ForwardResult result;
  auto& act = result.activations;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    act.streams.push_back(lmlsp_forward(params, cfg, b, blocks_input[b]));
    act.features.push_back(block_features(act.streams.back()));
  }

  auto& raw = result.raw;
  for (std::size_t t = 0; t < kTasks; ++t) {
    std::vector<Tensor> parts;
    for (const auto& f : act.features) {
      parts.push_back(t == 0 ? f.f_mu : f.f_sigma);
      parts.push_back(f.f_shared);
    }
    act.head_input[t] = concat_channels(parts);
    Tensor h = reshape(act.head_input[t], {1, cfg.head_input_size()});
    for (std::size_t l = 0; l < kFcLayers; ++l) {
      h = relu(dense(params.fc[l], h));
      h = h * sigmoid(dense(params.fc_masks[t][l], h));
    }
    raw[t] = reshape(dense(params.heads[t], h), {});
  }
  result.prediction.mu_hat = raw[0] + Tensor::scalar(cfg.mu_offset);
  result.prediction.sigma_hat = softplus(raw[1]);
  return result;
}

ForwardResult forward_features(const Parameters& params, const ModelConfig& cfg,
                               const Tensor& features) {
  const Shape expected{cfg.total_channels(), cfg.spatial, cfg.spatial};
  if (features.shape() != expected) {
    throw ShapeError("forward: feature map " + shape_to_string(features.shape()) +
                     " does not match configured " + shape_to_string(expected));
  }
  const auto blocks = split_features(features, cfg.n_blocks);
  return forward(params, cfg, blocks);
}

std::vector<Tensor> split_features(const Tensor& full, std::size_t n_blocks) {
  if (full.rank() < 1 || n_blocks == 0 || full.shape()[0] % n_blocks != 0) {
    throw ShapeError("split_features: " + shape_to_string(full.shape()) +
                     " cannot be split into " + std::to_string(n_blocks) + " equal channel chunks");
  }
  if (n_blocks == 1) return {full};
  Shape chunk_shape = full.shape();
  chunk_shape[0] /= n_blocks;
  const std::size_t chunk = shape_numel(chunk_shape);
  std::vector<Tensor> out;
  out.reserve(n_blocks);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const auto first = full.data().begin() + static_cast<long>(b * chunk);
    std::vector<double> values(first, first + static_cast<long>(chunk));
    out.push_back(make_op("slice_channels", chunk_shape, std::move(values), {full},
                          [b, chunk](const BackwardContext& c) {
                            for (std::size_t i = 0; i < chunk; ++i)
                              c.in_grad[0][b * chunk + i] += c.grad_out[i];
                          }));
  }
  return out;
}

}  // namespace mtci
