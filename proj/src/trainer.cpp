#include "mtci/trainer.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "mtci/error.hpp"
#include "mtci/rng.hpp"

namespace mtci {

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (!(initial_lr > 0)) throw ConfigError("train.initial_lr", "must be > 0");
  if (lr_decay_every < 1) throw ConfigError("train.lr_decay_every", "must be >= 1");
  if (!(lr_decay_factor > 0)) throw ConfigError("train.lr_decay_factor", "must be > 0");
  if (batch_size < 2) throw ConfigError("train.batch_size", "must be >= 2");
  if (epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps", "must be > 0");
  loss.validate();
  model.validate();
}

namespace {

std::string fc_to_string(const std::array<std::size_t, kFcLayers>& fc) {
  return std::to_string(fc[0]) + "," + std::to_string(fc[1]) + "," + std::to_string(fc[2]);
}

std::array<std::size_t, kFcLayers> fc_from_string(const std::string& s) {
  std::array<std::size_t, kFcLayers> out{};
  std::istringstream in(s);
  std::string part;
  std::size_t i = 0;
  while (std::getline(in, part, ',')) {
    if (i == kFcLayers) break;
    out[i++] = parse_size(part, "model.fc_sizes");
  }
  if (i != kFcLayers || in.rdbuf()->in_avail() > 0) {
    throw ConfigError("model.fc_sizes", "expected three comma-separated widths, got '" + s + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& s, const std::string& field) {
  return static_cast<std::uint64_t>(parse_size(s, field));
}

void model_to_kv(const ModelConfig& m, KeyValues& kv) {
  kv.set("model.n_blocks", m.n_blocks);
  kv.set("model.in_channels", m.in_channels);
  kv.set("model.spatial", m.spatial);
  kv.set("model.stream_out_channels", m.stream_out_channels);
  kv.set("model.attn_hidden_channels", m.attn_hidden_channels);
  kv.set("model.fc_sizes", fc_to_string(m.fc_sizes));
  kv.set("model.mu_offset", m.mu_offset);
  kv.set("model.seed", std::to_string(m.seed));
}

// Applies one key to the config; false when the key is not a known field.
bool apply_model_key(ModelConfig& m, const std::string& k, const std::string& v) {
  if (k == "model.n_blocks") m.n_blocks = parse_size(v, k);
  else if (k == "model.in_channels") m.in_channels = parse_size(v, k);
  else if (k == "model.spatial") m.spatial = parse_size(v, k);
  else if (k == "model.stream_out_channels") m.stream_out_channels = parse_size(v, k);
  else if (k == "model.attn_hidden_channels") m.attn_hidden_channels = parse_size(v, k);
  else if (k == "model.fc_sizes") m.fc_sizes = fc_from_string(v);
  else if (k == "model.mu_offset") m.mu_offset = parse_double(v, k);
  else if (k == "model.seed") m.seed = parse_u64(v, k);
  else return false;
  return true;
}

bool apply_train_key(TrainConfig& c, const std::string& k, const std::string& v) {
  if (apply_model_key(c.model, k, v)) return true;
  if (k == "loss.alpha_mu") c.loss.alpha_mu = parse_double(v, k);
  else if (k == "loss.alpha_sigma") c.loss.alpha_sigma = parse_double(v, k);
  else if (k == "loss.lambda") c.loss.lambda = parse_double(v, k);
  else if (k == "loss.tau") c.loss.tau = parse_double(v, k);
  else if (k == "loss.z") c.loss.z = parse_double(v, k);
  else if (k == "train.initial_lr") c.initial_lr = parse_double(v, k);
  else if (k == "train.lr_decay_every") c.lr_decay_every = parse_size(v, k);
  else if (k == "train.lr_decay_factor") c.lr_decay_factor = parse_double(v, k);
  else if (k == "train.batch_size") c.batch_size = parse_size(v, k);
  else if (k == "train.epochs") c.epochs = parse_size(v, k);
  else if (k == "train.beta1") c.beta1 = parse_double(v, k);
  else if (k == "train.beta2") c.beta2 = parse_double(v, k);
  else if (k == "train.eps") c.eps = parse_double(v, k);
  else if (k == "train.acc_cutoff") c.acc_cutoff = parse_double(v, k);
  else if (k == "train.seed") c.seed = parse_u64(v, k);
  else return false;
  return true;
}

}  // namespace

KeyValues config_to_kv(const TrainConfig& cfg) {
  KeyValues kv;
  model_to_kv(cfg.model, kv);
  kv.set("loss.alpha_mu", cfg.loss.alpha_mu);
  kv.set("loss.alpha_sigma", cfg.loss.alpha_sigma);
  kv.set("loss.lambda", cfg.loss.lambda);
  kv.set("loss.tau", cfg.loss.tau);
  kv.set("loss.z", cfg.loss.z);
  kv.set("train.initial_lr", cfg.initial_lr);
  kv.set("train.lr_decay_every", cfg.lr_decay_every);
  kv.set("train.lr_decay_factor", cfg.lr_decay_factor);
  kv.set("train.batch_size", cfg.batch_size);
  kv.set("train.epochs", cfg.epochs);
  kv.set("train.beta1", cfg.beta1);
  kv.set("train.beta2", cfg.beta2);
  kv.set("train.eps", cfg.eps);
  kv.set("train.acc_cutoff", cfg.acc_cutoff);
  kv.set("train.seed", std::to_string(cfg.seed));
  return kv;
}

TrainConfig config_from_kv(const KeyValues& kv, TrainConfig base) {
  for (const auto& [k, v] : kv.entries()) {
    if (!apply_train_key(base, k, v)) throw ConfigError(k, "unknown configuration key");
  }
  return base;
}

ModelConfig model_config_from_kv(const KeyValues& kv, ModelConfig base) {
  for (const auto& [k, v] : kv.entries()) {
    if (!apply_model_key(base, k, v)) throw ConfigError(k, "unknown model configuration key");
  }
  return base;
}

// ---------------------------------------------------------------------------
// Optimizer

OptimizerState OptimizerState::for_params(std::span<const Tensor> params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

namespace {
std::vector<Tensor> tensors_of(const Parameters& params) {
  std::vector<Tensor> out;
  for (auto& [name, t] : params.named()) out.push_back(t);
  return out;
}
}  // namespace

OptimizerState OptimizerState::for_params(const Parameters& params) {
  return for_params(tensors_of(params));
}

void adam_step(std::span<Tensor> params, OptimizerState& state, double lr, const AdamHyper& hyper) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(hyper.beta1, t);
  const double correct2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.numel() || v.size() != p.numel()) {
      throw ShapeError("adam_step: moment buffers of tensor " + std::to_string(i) +
                       " do not match shape " + shape_to_string(p.shape()));
    }
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
      v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
      const double m_hat = m[k] / correct1;
      const double v_hat = v[k] / correct2;
      w[k] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
    p.zero_grad();
  }
}

void adam_step(Parameters& params, OptimizerState& state, double lr, const AdamHyper& hyper) {
  auto tensors = tensors_of(params);
  adam_step(tensors, state, lr, hyper);
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  const auto decays = static_cast<double>(epoch / cfg.lr_decay_every);
  return cfg.initial_lr / std::pow(cfg.lr_decay_factor, decays);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(epoch) + 1)));
  rng.shuffle(std::span(order));
  return order;
}

// ---------------------------------------------------------------------------
// Training and evaluation

EpochMetrics train_epoch(Model& model, std::span<const DatasetItem* const> items,
                         const TrainConfig& cfg, OptimizerState& state, std::size_t epoch) {
  if (cfg.batch_size < 2) throw ConfigError("train.batch_size", "must be >= 2");
  if (items.empty()) throw ConfigError("train", "no training items");
  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.eps};
  EpochMetrics metrics;
  metrics.epoch = epoch;
  metrics.lr = lr_at_epoch(cfg, epoch);

  const auto order = epoch_order(items.size(), cfg.seed, epoch);
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    Batch batch;
    for (std::size_t k = start; k < end; ++k) {
      const auto* item = items[order[k]];
      batch.predictions.push_back(forward_features(model.params, model.cfg, item->features).prediction);
      batch.labels.push_back(item->label);
    }
    const auto pairs = cfg.loss.lambda > 0 ? build_pairs(batch.labels, cfg.loss) : PairSet{};
    const auto terms = loss_terms(batch, pairs, cfg.loss);
    terms.total.backward();
    adam_step(model.params, state, metrics.lr, hyper);

    ++metrics.steps;
    metrics.total += terms.total.item();
    metrics.mae_mu += terms.mae_mu.item();
    metrics.ci += terms.ci.item();
    metrics.sigma += terms.sigma.item();
    metrics.pairs += pairs.pairs.size();
    metrics.gated_pairs += pairs.gated_count();
  }
  const double steps = static_cast<double>(metrics.steps);
  metrics.total /= steps;
  metrics.mae_mu /= steps;
  metrics.ci /= steps;
  metrics.sigma /= steps;
  return metrics;
}

Predictions predict(const Model& model, std::span<const DatasetItem* const> items) {
  Predictions out;
  for (const auto* item : items) {
    const auto pred = forward_features(model.params, model.cfg, item->features).prediction;
    out.mu.push_back(pred.mu());
    out.sigma.push_back(pred.sigma());
  }
  return out;
}

KeyValues EvalReport::to_kv() const {
  KeyValues kv;
  auto opt = [&](const char* key, const std::optional<double>& v) {
    kv.set(key, v ? format_double(*v) : std::string("undefined"));
  };
  kv.set("n", n);
  opt("pcc_mu", pcc_mu);
  opt("scc_mu", scc_mu);
  kv.set("acc", acc);
  opt("pcc_sigma", pcc_sigma);
  opt("scc_sigma", scc_sigma);
  kv.set("mae_mu", mae_mu);
  kv.set("mae_sigma", mae_sigma);
  kv.set("mean_ci_half_width", mean_ci_half_width);
  return kv;
}

EvalReport evaluate_predictions(const Predictions& pred, std::span<const DatasetItem* const> items,
                                const LossConfig& loss, double cutoff) {
  if (items.empty()) throw ConfigError("split", "evaluation split is empty");
  if (pred.mu.size() != items.size() || pred.sigma.size() != items.size()) {
    throw ShapeError("evaluate: " + std::to_string(pred.mu.size()) + " predictions for " +
                     std::to_string(items.size()) + " items");
  }
  std::vector<double> mu, sigma;
  EvalReport r;
  r.n = items.size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& label = items[i]->label;
    mu.push_back(label.mu);
    sigma.push_back(label.sigma);
    r.mae_mu += std::abs(label.mu - pred.mu[i]);
    r.mae_sigma += std::abs(label.sigma - pred.sigma[i]);
    r.mean_ci_half_width += loss.z * pred.sigma[i] / std::sqrt(static_cast<double>(label.n_obs));
  }
  const double n = static_cast<double>(items.size());
  r.mae_mu /= n;
  r.mae_sigma /= n;
  r.mean_ci_half_width /= n;

  auto metric = [&](const char* name, auto&& fn, std::optional<double>& slot) {
    try {
      slot = fn();
    } catch (const Error& e) {
      r.notes.push_back(std::string(name) + ": " + e.what());
    }
  };
  metric("pcc_mu", [&] { return pcc(mu, pred.mu); }, r.pcc_mu);
  metric("scc_mu", [&] { return scc(mu, pred.mu); }, r.scc_mu);
  metric("pcc_sigma", [&] { return pcc(sigma, pred.sigma); }, r.pcc_sigma);
  metric("scc_sigma", [&] { return scc(sigma, pred.sigma); }, r.scc_sigma);
  r.acc = binary_accuracy(mu, pred.mu, cutoff);
  return r;
}

EvalReport evaluate(const Model& model, std::span<const DatasetItem* const> items,
                    const LossConfig& loss, double cutoff) {
  if (items.empty()) throw ConfigError("split", "evaluation split is empty");
  return evaluate_predictions(predict(model, items), items, loss, cutoff);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const TrainConfig& cfg, const OptimizerState& state, std::size_t epochs_done) {
  const auto named = params.named();
  std::vector<TensorEntry> entries;
  entries.push_back(text_entry("__config__", config_to_kv(cfg).to_block()));
  entries.push_back({"__epochs_done__", {}, {static_cast<double>(epochs_done)}});
  entries.push_back({"__adam_step__", {}, {static_cast<double>(state.step)}});
  for (const auto& [name, t] : named) {
    entries.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  }
  if (state.m.size() == named.size()) {
    for (std::size_t i = 0; i < named.size(); ++i) {
      entries.push_back({"adam.m/" + named[i].first, named[i].second.shape(), state.m[i]});
      entries.push_back({"adam.v/" + named[i].first, named[i].second.shape(), state.v[i]});
    }
  }
  write_tensor_file(path, entries);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto entries = read_tensor_file(path);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto find = [&](const std::string& name) -> const TensorEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError(name, "missing from checkpoint '" + path.string() + "'");
    return *it->second;
  };
  auto scalar_count = [&](const std::string& name) {
    const auto& e = find(name);
    if (e.data.size() != 1 || e.data[0] < 0 || e.data[0] != std::floor(e.data[0])) {
      throw ConfigError(name, "expected a nonnegative integer scalar");
    }
    return static_cast<std::uint64_t>(e.data[0]);
  };

  Checkpoint ck;
  ck.cfg = config_from_kv(KeyValues::parse_block(entry_text(find("__config__"))));
  ck.cfg.model.validate();
  ck.epochs_done = scalar_count("__epochs_done__");
  ck.state.step = scalar_count("__adam_step__");

  ck.params = init_parameters(ck.cfg.model);
  std::set<std::string> expected;
  const bool has_moments = by_name.contains("adam.m/" + ck.params.named().front().first);
  for (auto& [name, t] : ck.params.named()) {
    expected.insert(name);
    const auto& e = find(name);
    if (e.shape != t.shape()) {
      throw ConfigError(name, "checkpoint shape " + shape_to_string(e.shape) +
                                  " does not match configured " + shape_to_string(t.shape()));
    }
    Tensor handle = t;
    std::copy(e.data.begin(), e.data.end(), handle.mutable_data().begin());
    if (has_moments) {
      for (auto [prefix, buffers] : {std::pair{"adam.m/", &ck.state.m}, std::pair{"adam.v/", &ck.state.v}}) {
        const std::string key = prefix + name;
        const auto& moment = find(key);
        expected.insert(key);
        if (moment.shape != t.shape()) throw ConfigError(key, "moment buffer shape mismatch");
        buffers->push_back(moment.data);
      }
    } else {
      ck.state.m.emplace_back(t.numel(), 0.0);
      ck.state.v.emplace_back(t.numel(), 0.0);
    }
  }
  for (const auto& e : entries) {
    if (!e.name.starts_with("__") && !expected.contains(e.name)) {
      throw ConfigError(e.name, "unexpected tensor in checkpoint");
    }
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  auto ck = load_checkpoint(path);
  if (!(ck.cfg.model == expected)) {
    KeyValues have, want;
    model_to_kv(ck.cfg.model, have);
    model_to_kv(expected, want);
    for (std::size_t i = 0; i < have.entries().size(); ++i) {
      if (have.entries()[i].second != want.entries()[i].second) {
        throw ConfigError(have.entries()[i].first, "checkpoint has " + have.entries()[i].second +
                                                       ", expected " + want.entries()[i].second);
      }
    }
  }
  return ck;
}

FitResult fit(Model& model, const Dataset& ds, const TrainConfig& cfg, OptimizerState& state,
              std::size_t start_epoch, const FitHooks& hooks) {
  cfg.validate();
  const auto train = ds.subset(Split::train);
  auto select = ds.subset(Split::val);
  if (select.empty()) select = train;

  FitResult result;
  result.best_scc_mu = -std::numeric_limits<double>::infinity();
  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto m = train_epoch(model, train, cfg, state, epoch);
    const auto report = evaluate(model, select, cfg.loss, cfg.acc_cutoff);
    result.history.push_back(m);
    result.selection.push_back(report);
    if (hooks.on_epoch) hooks.on_epoch(m, report);
    const double score = report.scc_mu.value_or(-std::numeric_limits<double>::infinity());
    if (result.history.size() == 1 || score > result.best_scc_mu) {
      result.best_scc_mu = score;
      result.best_epoch = epoch;
      if (hooks.on_best) hooks.on_best(model, state, epoch + 1);
    }
  }
  return result;
}

}  // namespace mtci
