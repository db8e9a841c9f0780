#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mtci/error.hpp"
#include "mtci/trainer.hpp"
#include "test_util.hpp"

using namespace mtci;
using namespace mtci::testing;

namespace {

TrainConfig toy_config(std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.model = ModelConfig::toy();
  cfg.model.seed = seed;
  cfg.seed = seed;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  cfg.initial_lr = 1e-3;
  return cfg;
}

Dataset toy_data(std::size_t n, std::uint64_t seed = 1) {
  const auto m = ModelConfig::toy();
  return generate_synthetic({.n_items = n, .channels = m.total_channels(), .spatial = m.spatial, .seed = seed})
      .dataset;
}

std::vector<double> flat_params(const Parameters& p) {
  std::vector<double> out;
  for (const auto& [name, t] : p.named()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Labels and predictions read from the ten-item fixture file.
struct Fixture {
  Dataset ds;
  Predictions pred;
  KeyValues expected;
};

Fixture load_fixture() {
  Fixture f;
  std::ifstream in(std::string(MTCI_TEST_DATA_DIR) + "/eval_fixture.csv");
  REQUIRE(in);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.starts_with("id,")) continue;
    std::istringstream row(line);
    std::string id, field;
    std::getline(row, id, ',');
    std::vector<double> v;
    while (std::getline(row, field, ',')) v.push_back(std::stod(field));
    REQUIRE(v.size() == 5);
    ScoreLabel l;
    l.item_id = id;
    l.n_obs = static_cast<std::uint64_t>(v[0]);
    l.mu = v[1];
    l.sigma = v[2];
    f.ds.items.push_back({id, Tensor::zeros({1, 1, 1}), l, Split::test});
    f.pred.mu.push_back(v[3]);
    f.pred.sigma.push_back(v[4]);
  }
  std::ifstream exp(std::string(MTCI_TEST_DATA_DIR) + "/eval_fixture_expected.txt");
  std::stringstream text;
  text << exp.rdbuf();
  f.expected = KeyValues::parse_block(text.str());
  return f;
}

}  // namespace

TEST_CASE("TrainConfig defaults and validation") {
  const TrainConfig d;
  CHECK(d.initial_lr == 1e-4);
  CHECK(d.lr_decay_every == 20);
  CHECK(d.lr_decay_factor == 10.0);
  CHECK(d.beta1 == 0.9);
  CHECK(d.beta2 == 0.999);
  CHECK(d.eps == 1e-8);
  CHECK_NOTHROW(d.validate());

  auto bad = d;
  bad.batch_size = 1;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("train.batch_size"), ConfigError);
  bad = d;
  bad.initial_lr = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = d;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("configuration key=value round trip") {
  auto cfg = toy_config(17);
  cfg.loss.tau = 0.35;
  cfg.loss.lambda = 0.1 + 0.2;
  cfg.initial_lr = 3e-4;
  const auto kv = config_to_kv(cfg);
  CHECK(config_from_kv(kv) == cfg);
  CHECK(config_from_kv(KeyValues::parse_block(kv.to_block())) == cfg);

  KeyValues partial;
  partial.set("loss.z", 2.576);
  const auto over = config_from_kv(partial, cfg);
  CHECK(over.loss.z == 2.576);
  CHECK(over.model == cfg.model);

  KeyValues unknown;
  unknown.set("train.momentum", 0.5);
  CHECK_THROWS_WITH_AS(config_from_kv(unknown), doctest::Contains("train.momentum"), ConfigError);
  KeyValues bad_fc;
  bad_fc.set("model.fc_sizes", "16,16");
  CHECK_THROWS_AS(config_from_kv(bad_fc), ConfigError);
}

TEST_CASE("adam_step with zero gradient leaves parameters unchanged") {
  std::vector<Tensor> params{random_tensor({3, 4}, 1), random_tensor({5}, 2)};
  const auto before0 = to_vector(params[0].data());
  const auto before1 = to_vector(params[1].data());
  auto state = OptimizerState::for_params(params);
  for (int i = 0; i < 5; ++i) adam_step(params, state, 0.1);
  CHECK(to_vector(params[0].data()) == before0);
  CHECK(to_vector(params[1].data()) == before1);
  CHECK(state.step == 5);
}

TEST_CASE("adam_step matches hand evaluation") {
  std::vector<Tensor> params{Tensor::scalar(1.0, true)};
  auto state = OptimizerState::for_params(params);
  params[0].backward();  // d(x)/dx = 1
  adam_step(params, state, 0.1);
  CHECK(params[0].item() == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(1.0 - params[0].item() == doctest::Approx(0.1 / (1.0 + 1e-8)).epsilon(1e-14));
  CHECK(params[0].grad()[0] == 0.0);

  // constant gradient keeps m_hat / sqrt(v_hat) at 1
  for (int i = 0; i < 4; ++i) {
    const double prev = params[0].item();
    params[0].backward();
    adam_step(params, state, 0.1);
    CHECK(prev - params[0].item() == doctest::Approx(0.1).epsilon(1e-7));
  }

  // two steps with gradients 2 then -1, evaluated by hand
  std::vector<Tensor> q{Tensor::scalar(0.0, true)};
  auto s = OptimizerState::for_params(q);
  scale(q[0], 2.0).backward();
  adam_step(q, s, 0.5);
  scale(q[0], -1.0).backward();
  adam_step(q, s, 0.5);
  const double m1 = 0.1 * 2, v1 = 0.001 * 4;
  const double x1 = -0.5 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
  const double m2 = 0.9 * m1 + 0.1 * -1, v2 = 0.999 * v1 + 0.001 * 1;
  const double x2 = x1 - 0.5 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.998001)) + 1e-8);
  CHECK(q[0].item() == doctest::Approx(x2).epsilon(1e-14));
}

TEST_CASE("adam_step rejects mismatched state") {
  std::vector<Tensor> params{random_tensor({2, 2}, 3)};
  auto state = OptimizerState::for_params(params);
  std::vector<Tensor> more{params[0], random_tensor({2}, 4)};
  CHECK_THROWS_AS(adam_step(more, state, 0.1), ShapeError);
  std::vector<Tensor> reshaped{random_tensor({3}, 5)};
  CHECK_THROWS_AS(adam_step(reshaped, state, 0.1), ShapeError);
}

TEST_CASE("lr_at_epoch") {
  const TrainConfig cfg;
  CHECK(lr_at_epoch(cfg, 0) == 1e-4);
  CHECK(lr_at_epoch(cfg, 19) == 1e-4);
  CHECK(lr_at_epoch(cfg, 20) == doctest::Approx(1e-5).epsilon(1e-15));
  CHECK(lr_at_epoch(cfg, 45) == doctest::Approx(1e-6).epsilon(1e-15));
  double prev = lr_at_epoch(cfg, 0);
  for (std::size_t e = 1; e < 200; ++e) {
    CHECK(lr_at_epoch(cfg, e) <= prev);
    prev = lr_at_epoch(cfg, e);
  }
}

TEST_CASE("epoch_order") {
  const auto a = epoch_order(37, 5, 3);
  CHECK(a == epoch_order(37, 5, 3));
  CHECK(a != epoch_order(37, 5, 4));
  CHECK(a != epoch_order(37, 6, 3));
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 37);
  CHECK(*std::max_element(a.begin(), a.end()) == 36);
}

TEST_CASE("train_epoch performs ceil(N/B) steps") {
  const auto ds = toy_data(10);
  const auto items = ds.subset(Split::train);
  for (auto [batch, steps] : {std::pair{10, 1}, {4, 3}, {3, 4}, {2, 5}, {16, 1}}) {
    auto cfg = toy_config();
    cfg.batch_size = static_cast<std::size_t>(batch);
    Model model{cfg.model, init_parameters(cfg.model)};
    auto state = OptimizerState::for_params(model.params);
    const auto m = train_epoch(model, items, cfg, state, 0);
    CHECK(m.steps == static_cast<std::size_t>(steps));
    CHECK(state.step == static_cast<std::uint64_t>(steps));
    CHECK(std::isfinite(m.total));
  }
}

TEST_CASE("a one-item tail batch trains with a zero CI term") {
  const auto ds = toy_data(5);
  auto cfg = toy_config();
  cfg.batch_size = 4;
  cfg.loss.tau = 0.0;  // every real pair gated
  Model model{cfg.model, init_parameters(cfg.model)};
  auto state = OptimizerState::for_params(model.params);
  const auto m = train_epoch(model, ds.subset(Split::train), cfg, state, 0);
  CHECK(m.steps == 2);
  CHECK(m.pairs == 6);
  CHECK(m.gated_pairs == 6);
}

TEST_CASE("training is deterministic") {
  const auto ds = toy_data(20);
  auto run = [&] {
    auto cfg = toy_config(3);
    Model model{cfg.model, init_parameters(cfg.model)};
    auto state = OptimizerState::for_params(model.params);
    std::vector<double> log;
    for (std::size_t e = 0; e < 3; ++e) {
      const auto m = train_epoch(model, ds.subset(Split::train), cfg, state, e);
      log.insert(log.end(), {m.total, m.mae_mu, m.ci, m.sigma});
    }
    return std::pair{log, flat_params(model.params)};
  };
  const auto [log_a, params_a] = run();
  const auto [log_b, params_b] = run();
  CHECK(same_bits(log_a, log_b));
  CHECK(same_bits(params_a, params_b));
}

TEST_CASE("lambda 0 collapses to plain MAE training") {
  const auto ds = toy_data(12, 4);
  const auto items = ds.subset(Split::train);
  for (double alpha_sigma : {0.0, 0.4}) {
    CAPTURE(alpha_sigma);
    auto cfg = toy_config(9);
    cfg.batch_size = 5;
    cfg.loss.lambda = 0.0;
    cfg.loss.alpha_sigma = alpha_sigma;

    Model model{cfg.model, init_parameters(cfg.model)};
    auto state = OptimizerState::for_params(model.params);
    auto ref_params = init_parameters(cfg.model);
    auto ref_state = OptimizerState::for_params(ref_params);
    const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.eps};

    double worst = 0.0;
    for (std::size_t epoch = 0; epoch < 3; ++epoch) {
      const auto m = train_epoch(model, items, cfg, state, epoch);
      CHECK(m.ci == 0.0);
      CHECK(m.pairs == 0);

      // reference: alpha_mu * mean|mu - mu_hat| (+ alpha_sigma * mean|sigma - sigma_hat|)
      const auto order = epoch_order(items.size(), cfg.seed, epoch);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        Tensor mae, sig;
        for (std::size_t k = start; k < end; ++k) {
          const auto* item = items[order[k]];
          const auto p = forward_features(ref_params, cfg.model, item->features).prediction;
          const Tensor e = abs(p.mu_hat - Tensor::scalar(item->label.mu));
          const Tensor s = abs(p.sigma_hat - Tensor::scalar(item->label.sigma));
          mae = k == start ? e : mae + e;
          sig = k == start ? s : sig + s;
        }
        const double inv = 1.0 / static_cast<double>(end - start);
        Tensor loss = scale(scale(mae, inv), cfg.loss.alpha_mu);
        if (alpha_sigma > 0) loss = loss + scale(scale(sig, inv), alpha_sigma);
        loss.backward();
        adam_step(ref_params, ref_state, lr_at_epoch(cfg, epoch), hyper);
      }
      const auto a = flat_params(model.params), b = flat_params(ref_params);
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  const auto ds = toy_data(10);
  auto cfg = toy_config(2);
  Model model{cfg.model, init_parameters(cfg.model)};
  auto state = OptimizerState::for_params(model.params);
  train_epoch(model, ds.subset(Split::train), cfg, state, 0);
  save_checkpoint(dir / "c.ftns", model.params, cfg, state, 1);

  const auto ck = load_checkpoint(dir / "c.ftns");
  CHECK(ck.cfg == cfg);
  CHECK(ck.epochs_done == 1);
  CHECK(ck.state.step == state.step);
  CHECK(same_bits(flat_params(ck.params), flat_params(model.params)));
  REQUIRE(ck.state.m.size() == state.m.size());
  for (std::size_t i = 0; i < state.m.size(); ++i) {
    CHECK(same_bits(ck.state.m[i], state.m[i]));
    CHECK(same_bits(ck.state.v[i], state.v[i]));
  }
  CHECK_NOTHROW(load_checkpoint(dir / "c.ftns", cfg.model));

  auto other = cfg.model;
  other.attn_hidden_channels = 5;
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "c.ftns", other),
                       doctest::Contains("model.attn_hidden_channels"), ConfigError);
  other = cfg.model;
  other.seed = 99;
  CHECK_THROWS_AS(load_checkpoint(dir / "c.ftns", other), ConfigError);

  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ftns"), Error);
}

TEST_CASE("checkpoint with tampered shapes is rejected") {
  TempDir dir("ckpt-bad");
  auto cfg = toy_config();
  const auto params = init_parameters(cfg.model);
  save_checkpoint(dir / "c.ftns", params, cfg, OptimizerState::for_params(params), 0);
  auto entries = read_tensor_file(dir / "c.ftns");
  for (auto& e : entries) {
    if (e.name == "__config__") {
      auto kv = KeyValues::parse_block(entry_text(e));
      KeyValues edited;
      for (const auto& [k, v] : kv.entries()) edited.set(k, k == "model.stream_out_channels" ? "9" : v);
      e = text_entry("__config__", edited.to_block());
    }
  }
  write_tensor_file(dir / "bad.ftns", entries);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ftns"), ConfigError);
}

TEST_CASE("resuming from a checkpoint equals uninterrupted training") {
  TempDir dir("resume");
  const auto ds = toy_data(14, 6);
  auto cfg = toy_config(5);
  cfg.epochs = 6;
  cfg.lr_decay_every = 2;  // the schedule crosses the resume point

  Model straight{cfg.model, init_parameters(cfg.model)};
  auto s1 = OptimizerState::for_params(straight.params);
  const auto full = fit(straight, ds, cfg, s1);

  Model first{cfg.model, init_parameters(cfg.model)};
  auto s2 = OptimizerState::for_params(first.params);
  auto head = cfg;
  head.epochs = 3;
  fit(first, ds, head, s2);
  save_checkpoint(dir / "mid.ftns", first.params, cfg, s2, 3);

  auto ck = load_checkpoint(dir / "mid.ftns", cfg.model);
  Model resumed{ck.cfg.model, ck.params};
  const auto tail = fit(resumed, ds, ck.cfg, ck.state, ck.epochs_done);

  CHECK(same_bits(flat_params(resumed.params), flat_params(straight.params)));
  REQUIRE(tail.history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(tail.history[i].total == full.history[3 + i].total);
}

TEST_CASE("evaluate_predictions on the hand fixture") {
  const auto f = load_fixture();
  const auto items = f.ds.subset(Split::test);
  const auto r = evaluate_predictions(f.pred, items, LossConfig{});
  CHECK(r.n == f.expected.get_size("n"));
  for (auto [key, value] : {std::pair{"pcc_mu", r.pcc_mu}, {"scc_mu", r.scc_mu},
                            {"pcc_sigma", r.pcc_sigma}, {"scc_sigma", r.scc_sigma}}) {
    CAPTURE(key);
    REQUIRE(value.has_value());
    CHECK(*value == doctest::Approx(f.expected.get_double(key)).epsilon(1e-12));
  }
  CHECK(r.acc == f.expected.get_double("acc"));
  CHECK(r.mae_mu == doctest::Approx(f.expected.get_double("mae_mu")).epsilon(1e-12));
  CHECK(r.mae_sigma == doctest::Approx(f.expected.get_double("mae_sigma")).epsilon(1e-12));
  CHECK(r.mean_ci_half_width == doctest::Approx(f.expected.get_double("mean_ci_half_width")).epsilon(1e-12));
  CHECK(r.notes.empty());
}

TEST_CASE("evaluate_predictions identity and negation") {
  const auto f = load_fixture();
  const auto items = f.ds.subset(Split::test);
  Predictions truth;
  for (const auto* item : items) {
    truth.mu.push_back(item->label.mu);
    truth.sigma.push_back(item->label.sigma);
  }
  const auto id = evaluate_predictions(truth, items, LossConfig{});
  CHECK(*id.pcc_mu == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*id.scc_mu == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*id.pcc_sigma == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(id.acc == 1.0);
  CHECK(id.mae_mu == 0.0);

  auto neg = truth;
  double mean = 0.0;
  for (double m : truth.mu) mean += m / static_cast<double>(truth.mu.size());
  for (auto& m : neg.mu) m = 2 * mean - m;
  const auto r = evaluate_predictions(neg, items, LossConfig{});
  CHECK(*r.pcc_mu == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(*r.scc_mu == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("evaluate reports undefined correlations and still scores accuracy") {
  const auto f = load_fixture();
  const auto items = f.ds.subset(Split::test);
  Predictions flat{std::vector<double>(items.size(), 6.0), std::vector<double>(items.size(), 1.0)};
  const auto r = evaluate_predictions(flat, items, LossConfig{});
  CHECK_FALSE(r.pcc_mu.has_value());
  CHECK_FALSE(r.scc_sigma.has_value());
  CHECK(r.notes.size() == 4);
  CHECK(r.acc == 0.5);
  CHECK(r.to_kv().get("pcc_mu") == "undefined");

  Predictions short_pred{{1.0}, {1.0}};
  CHECK_THROWS_AS(evaluate_predictions(short_pred, items, LossConfig{}), ShapeError);
  CHECK_THROWS_AS(evaluate_predictions(Predictions{}, {}, LossConfig{}), ConfigError);
}

TEST_CASE("evaluate runs the model") {
  const auto ds = toy_data(8);
  auto cfg = toy_config(4);
  Model model{cfg.model, init_parameters(cfg.model)};
  const auto items = ds.subset(Split::train);
  const auto a = evaluate(model, items, cfg.loss);
  const auto b = evaluate_predictions(predict(model, items), items, cfg.loss);
  CHECK(a.to_kv().to_block() == b.to_kv().to_block());
  CHECK(a.n == 8);
}

TEST_CASE("fit selects on the validation split") {
  auto ds = split_dataset(toy_data(20, 2), {0.7, 0.3, 0.0}, 1);
  auto cfg = toy_config(6);
  cfg.epochs = 5;
  Model model{cfg.model, init_parameters(cfg.model)};
  auto state = OptimizerState::for_params(model.params);
  std::size_t epochs_seen = 0, best_calls = 0;
  std::size_t last_best = 0;
  FitHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m, const EvalReport& r) {
    CHECK(m.epoch == epochs_seen++);
    CHECK(r.n == 6);
  };
  hooks.on_best = [&](const Model&, const OptimizerState&, std::size_t done) {
    ++best_calls;
    last_best = done;
  };
  const auto res = fit(model, ds, cfg, state, 0, hooks);
  CHECK(epochs_seen == 5);
  CHECK(res.history.size() == 5);
  CHECK(best_calls >= 1);
  CHECK(last_best == res.best_epoch + 1);
  for (const auto& r : res.selection) CHECK(r.scc_mu.value_or(-2) <= res.best_scc_mu);
  CHECK(state.step == 5 * 2);  // 14 train items, batch 8
}
