#include "commands.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mtci/data.hpp"
#include "mtci/kv.hpp"
#include "mtci/model_check.hpp"
#include "mtci/stats.hpp"
#include "mtci/trainer.hpp"

namespace fs = std::filesystem;

namespace mtci::cli {

namespace {

KeyValues read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::stringstream text;
  text << in.rdbuf();
  return KeyValues::parse_block(text.str());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
  }
}

Dataset read_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw UsageError("data directory '" + dir + "' does not exist");
  for (const char* f : {"features.ftns", "labels.csv"}) {
    if (!fs::exists(fs::path(dir) / f)) throw UsageError("data directory '" + dir + "' has no " + f);
  }
  return load_dataset(dir);
}

// Every parameter shape must agree with the dataset's feature maps.
void check_compatible(const ModelConfig& m, const Dataset& ds) {
  const Shape expected{m.total_channels(), m.spatial, m.spatial};
  if (ds.feature_shape() != expected) {
    throw ConfigError("model", "checkpoint expects features " + shape_to_string(expected) +
                                   ", dataset has " + shape_to_string(ds.feature_shape()));
  }
}

std::vector<const DatasetItem*> require_split(const Dataset& ds, const std::string& name) {
  const Split s = parse_split(name);
  auto items = ds.subset(s);
  if (items.empty()) throw UsageError("dataset has no items tagged '" + name + "'");
  return items;
}

// Keys whose defaults are the published training setup.
const std::set<std::string>& paper_keys() {
  static const std::set<std::string> keys{"loss.alpha_mu",          "loss.alpha_sigma",
                                          "loss.lambda",            "loss.z",
                                          "train.initial_lr",       "train.lr_decay_every",
                                          "train.lr_decay_factor",  "train.acc_cutoff"};
  return keys;
}

void append_prefixed(KeyValues& dst, const std::string& prefix, const KeyValues& src) {
  for (const auto& [k, v] : src.entries()) dst.set(prefix + k, v);
}

}  // namespace

void gen_synth(const GenSynthOptions& o, std::ostream& out) {
  if (o.out.empty()) throw UsageError("--out is required");
  if (o.n < 1) throw UsageError("--n must be >= 1");
  if (o.blocks < 1) throw UsageError("--blocks must be >= 1");
  if (o.channels < 1) throw UsageError("--channels must be >= 1");

  SynthSpec spec;
  spec.n_items = o.n;
  spec.channels = o.channels * o.blocks;
  spec.spatial = o.spatial;
  spec.seed = o.seed;
  spec.n_obs = o.n_obs;
  spec.validate();
  auto synth = generate_synthetic(spec);
  const auto ds = split_dataset(std::move(synth.dataset), o.split, o.seed);

  make_dir(o.out);
  save_dataset(o.out, ds);

  KeyValues manifest;
  manifest.set("command", "gen-synth");
  append_prefixed(manifest, "synth.", spec.to_kv());
  manifest.set("synth.blocks", o.blocks);
  manifest.set("synth.channels_per_block", o.channels);
  manifest.set("split.train", o.split[0]);
  manifest.set("split.val", o.split[1]);
  manifest.set("split.test", o.split[2]);
  manifest.set("split.seed", std::to_string(o.seed));
  write_text(fs::path(o.out) / "manifest.txt", manifest.to_block());

  std::ostringstream latent;
  latent << "id,mu_star,sigma_star\n";
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    latent << ds.items[i].id << ',' << format_double(synth.latent_mu[i]) << ','
           << format_double(synth.latent_sigma[i]) << '\n';
  }
  write_text(fs::path(o.out) / "latent.csv", latent.str());

  KeyValues result;
  result.set("status", "ok");
  result.set("out", o.out);
  result.set("n_items", ds.items.size());
  result.set("feature_shape", shape_to_string(ds.feature_shape()));
  result.set("train", ds.subset(Split::train).size());
  result.set("val", ds.subset(Split::val).size());
  result.set("test", ds.subset(Split::test).size());
  out << result.to_block();
}

void train(const TrainOptions& o, std::ostream& out) {
  if (o.data.empty()) throw UsageError("--data is required");
  if (o.out.empty()) throw UsageError("--out is required");

  TrainConfig cfg;
  std::map<std::string, std::string> origin;
  if (o.config) {
    const auto kv = read_kv_file(*o.config);
    cfg = config_from_kv(kv, cfg);
    for (const auto& [k, v] : kv.entries()) origin[k] = "config";
  }
  auto flag = [&](const auto& value, auto& field, const char* key) {
    if (value) {
      field = *value;
      origin[key] = "flag";
    }
  };
  flag(o.epochs, cfg.epochs, "train.epochs");
  flag(o.tau, cfg.loss.tau, "loss.tau");
  flag(o.lambda, cfg.loss.lambda, "loss.lambda");
  flag(o.alpha_mu, cfg.loss.alpha_mu, "loss.alpha_mu");
  flag(o.alpha_sigma, cfg.loss.alpha_sigma, "loss.alpha_sigma");
  flag(o.seed, cfg.seed, "train.seed");
  flag(o.seed, cfg.model.seed, "model.seed");
  flag(o.batch_size, cfg.batch_size, "train.batch_size");
  flag(o.lr, cfg.initial_lr, "train.initial_lr");

  const auto ds = read_dataset(o.data);
  const auto& shape = ds.feature_shape();
  if (shape[1] != shape[2]) throw UsageError("feature maps must be square, got " + shape_to_string(shape));
  if (!origin.contains("model.spatial")) {
    cfg.model.spatial = shape[1];
    origin["model.spatial"] = "data";
  }
  if (!origin.contains("model.in_channels")) {
    if (cfg.model.n_blocks == 0 || shape[0] % cfg.model.n_blocks != 0) {
      throw ConfigError("model.n_blocks", std::to_string(shape[0]) + " feature channels do not split into " +
                                              std::to_string(cfg.model.n_blocks) + " blocks");
    }
    cfg.model.in_channels = shape[0] / cfg.model.n_blocks;
    origin["model.in_channels"] = "data";
  }
  cfg.validate();
  check_compatible(cfg.model, ds);
  if (!ds.has_split(Split::train)) throw UsageError("dataset has no items tagged 'train'");
  const bool has_val = ds.has_split(Split::val);

  make_dir(o.out);
  const fs::path dir(o.out);
  KeyValues manifest;
  manifest.set("command", "train");
  manifest.set("data", o.data);
  manifest.set("train_items", ds.subset(Split::train).size());
  manifest.set("val_items", ds.subset(Split::val).size());
  manifest.set("selection_split", has_val ? "val" : "train");
  const auto effective = config_to_kv(cfg);
  for (const auto& [k, v] : effective.entries()) manifest.set(k, v);
  for (const auto& [k, v] : effective.entries()) {
    std::string src = "default";
    if (auto it = origin.find(k); it != origin.end()) src = it->second;
    else if (paper_keys().contains(k)) src = "paper";
    manifest.set("origin." + k, src);
  }
  write_text(dir / "manifest.txt", manifest.to_block());

  std::ofstream log(dir / "train_log.txt", std::ios::trunc);
  if (!log) throw Error("cannot open '" + (dir / "train_log.txt").string() + "' for writing");

  Model model{cfg.model, init_parameters(cfg.model)};
  auto state = OptimizerState::for_params(model.params);
  FitHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m, const EvalReport& r) {
    KeyValues line;
    line.set("epoch", m.epoch);
    line.set("lr", m.lr);
    line.set("steps", m.steps);
    line.set("loss_total", m.total);
    line.set("loss_mae_mu", m.mae_mu);
    line.set("loss_ci", m.ci);
    line.set("loss_sigma", m.sigma);
    line.set("pairs", m.pairs);
    line.set("gated_pairs", m.gated_pairs);
    append_prefixed(line, "select_", r.to_kv());
    log << line.to_line() << '\n' << std::flush;
  };
  hooks.on_best = [&](const Model& best, const OptimizerState& s, std::size_t done) {
    save_checkpoint(dir / "best.ftns", best.params, cfg, s, done);
  };
  const auto result = fit(model, ds, cfg, state, 0, hooks);
  save_checkpoint(dir / "final.ftns", model.params, cfg, state, cfg.epochs);

  const auto& last = result.history.back();
  KeyValues summary;
  summary.set("status", "ok");
  summary.set("epochs", cfg.epochs);
  summary.set("final_loss_total", last.total);
  summary.set("best_epoch", result.best_epoch);
  summary.set("best_select_scc_mu", result.best_scc_mu);
  summary.set("final_checkpoint", (dir / "final.ftns").string());
  summary.set("best_checkpoint", (dir / "best.ftns").string());
  summary.set("manifest", (dir / "manifest.txt").string());
  summary.set("log", (dir / "train_log.txt").string());
  out << summary.to_block();
}

void eval(const EvalOptions& o, std::ostream& out) {
  if (o.data.empty()) throw UsageError("--data is required");
  if (o.checkpoint.has_value() == o.fresh_seed.has_value()) {
    throw UsageError("exactly one of --checkpoint and --fresh-seed is required");
  }
  const auto ds = read_dataset(o.data);
  const auto items = require_split(ds, o.split);

  TrainConfig cfg;
  Model model;
  if (o.checkpoint) {
    auto ck = load_checkpoint(*o.checkpoint);
    cfg = ck.cfg;
    model = {ck.cfg.model, std::move(ck.params)};
  } else {
    const auto& shape = ds.feature_shape();
    cfg.model.spatial = shape[1];
    if (shape[0] % cfg.model.n_blocks != 0) {
      throw ConfigError("model.n_blocks", "feature channels do not split into blocks");
    }
    cfg.model.in_channels = shape[0] / cfg.model.n_blocks;
    cfg.model.seed = *o.fresh_seed;
    model = {cfg.model, init_parameters(cfg.model)};
  }
  check_compatible(model.cfg, ds);

  const auto report = evaluate(model, items, cfg.loss, cfg.acc_cutoff);
  KeyValues result;
  result.set("status", "ok");
  result.set("split", o.split);
  result.set("model", o.checkpoint ? *o.checkpoint : "fresh seed " + std::to_string(*o.fresh_seed));
  append_prefixed(result, "", report.to_kv());
  result.set("cutoff", cfg.acc_cutoff);
  for (std::size_t i = 0; i < report.notes.size(); ++i) result.set("note." + std::to_string(i), report.notes[i]);
  out << result.to_block();
}

void rank(const RankOptions& o, std::ostream& out) {
  if (o.data.empty()) throw UsageError("--data is required");
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (o.all_pairs == !o.pairs.empty()) throw UsageError("give exactly one of --pairs and --all-pairs");
  if (!(o.z >= 0)) throw UsageError("--z must be >= 0");
  if (o.n_obs_assumed < 1) throw UsageError("--n-obs-assumed must be >= 1");

  const auto ds = read_dataset(o.data);
  std::map<std::string, const DatasetItem*> by_id;
  for (const auto& item : ds.items) by_id[item.id] = &item;

  std::vector<std::pair<const DatasetItem*, const DatasetItem*>> pairs;
  if (o.all_pairs) {
    for (std::size_t a = 0; a < ds.items.size(); ++a)
      for (std::size_t b = a + 1; b < ds.items.size(); ++b) pairs.emplace_back(&ds.items[a], &ds.items[b]);
  } else {
    auto lookup = [&](const std::string& id) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw UsageError("unknown item id '" + id + "'");
      return it->second;
    };
    for (const auto& spec : o.pairs) {
      const auto colon = spec.find(':');
      if (colon == std::string::npos) throw UsageError("pair '" + spec + "' is not of the form a:b");
      pairs.emplace_back(lookup(spec.substr(0, colon)), lookup(spec.substr(colon + 1)));
    }
  }

  const auto ck = load_checkpoint(o.checkpoint);
  const Model model{ck.cfg.model, ck.params};
  check_compatible(model.cfg, ds);
  std::map<const DatasetItem*, Prediction> cache;
  auto predicted = [&](const DatasetItem* item) {
    auto it = cache.find(item);
    if (it == cache.end()) {
      it = cache.emplace(item, forward_features(model.params, model.cfg, item->features).prediction).first;
    }
    ScoreLabel l;
    l.item_id = item->id;
    l.mu = it->second.mu();
    l.sigma = it->second.sigma();
    l.n_obs = o.n_obs_assumed;
    return l;
  };

  const CIConfig ci{o.z};
  KeyValues header;
  header.set("status", "ok");
  header.set("pairs", pairs.size());
  header.set("z", o.z);
  header.set("n_obs", std::to_string(o.n_obs_assumed));
  header.set("n_obs_source", "assumed-n");
  out << header.to_block();
  for (const auto& [pa, pb] : pairs) {
    const auto a = predicted(pa);
    const auto b = predicted(pb);
    const auto ia = ci_mean(a, ci), ib = ci_mean(b, ci);
    const auto diff = ci_difference(a, b, ci);
    KeyValues line;
    line.set("a", a.item_id);
    line.set("b", b.item_id);
    line.set("mu_a", a.mu);
    line.set("mu_b", b.mu);
    line.set("sigma_a", a.sigma);
    line.set("sigma_b", b.sigma);
    line.set("ci_a_lo", ia.lo);
    line.set("ci_a_hi", ia.hi);
    line.set("ci_b_lo", ib.lo);
    line.set("ci_b_hi", ib.hi);
    line.set("diff_lo", diff.lo);
    line.set("diff_hi", diff.hi);
    line.set("verdict", verdict_name(compare_items(a, b, ci)));
    out << line.to_line() << '\n';
  }
}

void grad_check(const GradCheckOptions& o, std::ostream& out) {
  if (!(o.tolerance > 0)) throw UsageError("--tolerance must be > 0");
  TrainConfig base;
  base.model = ModelConfig::toy();
  ModelConfig cfg = o.config ? config_from_kv(read_kv_file(*o.config), base).model : base.model;
  cfg.seed = o.seed;
  cfg.validate();

  const auto t0 = std::chrono::steady_clock::now();
  const auto r = model_grad_check(cfg, o.seed + 1);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = r.max_rel_error < o.tolerance;

  KeyValues result;
  result.set("status", pass ? "pass" : "fail");
  result.set("tolerance", o.tolerance);
  result.set("max_rel_error", r.max_rel_error);
  result.set("worst_parameter", r.worst_name);
  result.set("worst_element", r.worst_element);
  result.set("worst_analytic", r.worst_analytic);
  result.set("worst_numeric", r.worst_numeric);
  result.set("max_rel_error_mu", r.mu.max_rel_error);
  result.set("max_rel_error_sigma", r.sigma.max_rel_error);
  result.set("elements_per_head", r.checked);
  result.set("kink_limited", r.kink_limited);
  result.set("seed", std::to_string(o.seed));
  result.set("seconds", seconds);
  out << result.to_block();
  if (!pass) {
    throw CheckFailed("max relative error " + format_double(r.max_rel_error) + " at " + r.worst_name + "[" +
                      std::to_string(r.worst_element) + "] is not below " + format_double(o.tolerance));
  }
}

}  // namespace mtci::cli
