#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mtci/data.hpp"
#include "mtci/error.hpp"
#include "mtci/rng.hpp"
#include "test_util.hpp"

using namespace mtci;
using namespace mtci::testing;

namespace {

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<ScoreLabel> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_labels(in);
}

std::size_t parse_error_row(const std::string& text) {
  try {
    parse(text);
  } catch (const ParseError& e) {
    return e.row();
  }
  return 0;
}

std::size_t format_error_offset(std::span<const std::uint8_t> bytes) {
  try {
    decode_tensors(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  return SIZE_MAX;
}

std::vector<TensorEntry> random_entries(Rng& rng) {
  std::vector<TensorEntry> out;
  for (std::size_t rank = 0; rank <= 4; ++rank) {
    TensorEntry e;
    e.name = "t" + std::to_string(rank) + "_\xc3\xa9";
    std::size_t n = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      e.shape.push_back(1 + rng.below(4));
      n *= e.shape.back();
    }
    for (std::size_t i = 0; i < n; ++i) e.data.push_back(rng.normal(0.0, 1e3));
    out.push_back(std::move(e));
  }
  // values whose bit patterns must survive untouched
  out.push_back({"special", {5}, {-0.0, 5e-324, 1e308, std::nextafter(1.0, 2.0), -1.0 / 3.0}});
  return out;
}

Dataset items_dataset(std::size_t n) {
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    ScoreLabel l;
    l.item_id = "i" + std::to_string(i);
    l.mu = 5;
    l.sigma = 1;
    l.n_obs = 10;
    ds.items.push_back({l.item_id, Tensor::zeros({1, 1, 1}), l, Split::train});
  }
  return ds;
}

}  // namespace

TEST_CASE("FTNS round trip is bitwise") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto entries = random_entries(rng);
    const auto decoded = decode_tensors(encode_tensors(entries));
    REQUIRE(decoded.size() == entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      CHECK(decoded[i].name == entries[i].name);
      CHECK(decoded[i].shape == entries[i].shape);
      REQUIRE(decoded[i].data.size() == entries[i].data.size());
      CHECK(std::memcmp(decoded[i].data.data(), entries[i].data.data(),
                        entries[i].data.size() * sizeof(double)) == 0);
    }
  }
}

TEST_CASE("FTNS byte layout") {
  const std::vector<TensorEntry> one{{"ab", {2}, {1.0, -2.0}}};
  const auto bytes = encode_tensors(one);
  const std::vector<std::uint8_t> header{'F', 'T', 'N', 'S', 1, 0, 0, 0, 1, 0, 0, 0,
                                         2, 0, 0, 0, 'a', 'b', 1, 0, 0, 0, 2, 0, 0, 0};
  REQUIRE(bytes.size() == header.size() + 16);
  CHECK(std::equal(header.begin(), header.end(), bytes.begin()));
  // 1.0 little-endian
  CHECK(bytes[26 + 6] == 0xf0);
  CHECK(bytes[26 + 7] == 0x3f);
}

TEST_CASE("FTNS files on disk") {
  TempDir dir("ftns");
  Rng rng(9);
  const auto entries = random_entries(rng);
  write_tensor_file(dir / "a.ftns", entries);
  CHECK(read_tensor_file(dir / "a.ftns") == entries);

  write_tensor_file(dir / "empty.ftns", {});
  CHECK(file_bytes(dir / "empty.ftns").size() == 12);
  CHECK(read_tensor_file(dir / "empty.ftns").empty());

  CHECK_THROWS_AS(read_tensor_file(dir / "missing.ftns"), Error);
}

TEST_CASE("FTNS decoding errors carry offsets") {
  const std::vector<TensorEntry> entries{{"x", {2, 2}, {1, 2, 3, 4}}, {"y", {}, {7}}};
  const auto good = encode_tensors(entries);

  auto bad_magic = good;
  bad_magic[1] = 'X';
  CHECK_THROWS_WITH_AS(decode_tensors(bad_magic), doctest::Contains("bad magic"), FormatError);
  CHECK(format_error_offset(bad_magic) == 0);

  auto version = good;
  version[4] = 2;
  CHECK(format_error_offset(version) == 4);

  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() - 1, good.size() - 9}) {
    std::vector<std::uint8_t> truncated(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(decode_tensors(truncated), FormatError);
    CHECK(format_error_offset(truncated) <= cut);
  }

  auto trailing = good;
  trailing.push_back(0);
  CHECK(format_error_offset(trailing) == good.size());

  // second entry renamed to "x": the duplicate is reported where it starts
  auto dup = good;
  const std::size_t second = 12 + 4 + 1 + 4 + 8 + 32;
  REQUIRE(dup[second + 4] == 'y');
  dup[second + 4] = 'x';
  CHECK_THROWS_WITH_AS(decode_tensors(dup), doctest::Contains("duplicate"), FormatError);
  CHECK(format_error_offset(dup) == second);

  const std::vector<TensorEntry> twice{{"x", {}, {1}}, {"x", {}, {2}}};
  CHECK_THROWS_AS(encode_tensors(twice), FormatError);

  auto zero = good;
  zero[12 + 4 + 1 + 4] = 0;  // first extent of "x"
  CHECK(format_error_offset(zero) == 12 + 4 + 1 + 4);
}

TEST_CASE("text entries") {
  const auto e = text_entry("__config__", "a=1\nb=2\n");
  CHECK(e.shape == Shape{8});
  CHECK(entry_text(e) == "a=1\nb=2\n");
}

TEST_CASE("parse_labels histogram rows") {
  const auto labels = parse("id,n_obs,v1,v2,v3,v4,v5,v6,v7,v8,v9,v10\na,2,1,0,0,0,0,0,0,0,1,0\n");
  REQUIRE(labels.size() == 1);
  const auto& a = labels[0];
  CHECK(a.item_id == "a");
  CHECK(a.mu == 5.0);
  CHECK(a.sigma == 4.0);
  CHECK(a.n_obs == 2);
  REQUIRE(a.votes.has_value());
  CHECK((*a.votes)[0] == 1);
  CHECK((*a.votes)[8] == 1);
}

TEST_CASE("parse_labels direct rows") {
  const auto labels = parse("id,n_obs,mu,sigma\r\nb,100,5.0,0.0\r\n\nc,3,2.25,1.5\n");
  REQUIRE(labels.size() == 2);
  CHECK(labels[0].item_id == "b");
  CHECK(labels[0].mu == 5.0);
  CHECK(labels[0].sigma == 0.0);
  CHECK(labels[0].n_obs == 100);
  CHECK_FALSE(labels[0].votes.has_value());
  CHECK(labels[1].mu == 2.25);
}

TEST_CASE("parse_labels errors name the row") {
  const std::string hist = "id,n_obs,v1,v2,v3,v4,v5,v6,v7,v8,v9,v10\n";
  CHECK(parse_error_row(hist + "ok,1,1,0,0,0,0,0,0,0,0,0\nbad,3,1,0,0,0,0,0,0,0,1,0\n") == 3);
  CHECK(parse_error_row(hist + "neg,1,2,-1,0,0,0,0,0,0,0,0\n") == 2);
  CHECK(parse_error_row("id,mu,sigma\n") == 1);
  CHECK(parse_error_row("") == 1);
  CHECK(parse_error_row("id,n_obs,mu,sigma\na,10,5\n") == 2);
  CHECK(parse_error_row("id,n_obs,mu,sigma\na,10,5,1\na,10,5,1\n") == 3);
  CHECK(parse_error_row("id,n_obs,mu,sigma\n,10,5,1\n") == 2);
  CHECK(parse_error_row("id,n_obs,mu,sigma\na,0,5,1\n") == 2);
  CHECK(parse_error_row("id,n_obs,mu,sigma\na,10,5,-1\n") == 2);
  CHECK(parse_error_row("id,n_obs,mu,sigma\na,10,five,1\n") == 2);
  CHECK(parse_error_row("id,n_obs,mu,sigma\na,10,nan,1\n") == 2);
}

TEST_CASE("labels round trip through files") {
  TempDir dir("labels");
  auto synth = generate_synthetic({.n_items = 12, .channels = 4, .spatial = 2, .seed = 3, .n_obs = 25});
  std::vector<ScoreLabel> labels;
  for (const auto& item : synth.dataset.items) labels.push_back(item.label);
  write_labels(dir / "h.csv", labels);
  const auto back = load_labels(dir / "h.csv");
  REQUIRE(back.size() == labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CHECK(back[i].item_id == labels[i].item_id);
    CHECK(back[i].votes == labels[i].votes);
    CHECK(back[i].mu == labels[i].mu);
    CHECK(back[i].sigma == labels[i].sigma);
  }

  labels[0].votes.reset();
  labels[0].mu = 0.1 + 0.2;
  write_labels(dir / "d.csv", labels);
  const auto direct = load_labels(dir / "d.csv");
  CHECK_FALSE(direct[1].votes.has_value());
  CHECK(direct[0].mu == 0.1 + 0.2);
  CHECK(direct[3].sigma == labels[3].sigma);
}

TEST_CASE("dataset save and load") {
  TempDir dir("ds");
  auto ds = split_dataset(generate_synthetic({.n_items = 20, .channels = 6, .spatial = 3, .seed = 4}).dataset,
                          {0.5, 0.25, 0.25}, 1);
  save_dataset(dir.path(), ds);
  const auto back = load_dataset(dir.path());
  REQUIRE(back.items.size() == ds.items.size());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    CHECK(back.items[i].id == ds.items[i].id);
    CHECK(back.items[i].split == ds.items[i].split);
    CHECK(back.items[i].features.shape() == ds.items[i].features.shape());
    CHECK(to_vector(back.items[i].features.data()) == to_vector(ds.items[i].features.data()));
    CHECK(back.items[i].label.votes == ds.items[i].label.votes);
  }

  std::filesystem::remove(dir / "splits.csv");
  for (const auto& item : load_dataset(dir.path()).items) CHECK(item.split == Split::train);

  // a label without a feature tensor
  std::ofstream(dir / "labels.csv", std::ios::app) << "extra,1,1,0,0,0,0,0,0,0,0,0\n";
  CHECK_THROWS_AS(load_dataset(dir.path()), ConfigError);
}

TEST_CASE("Dataset validation") {
  auto ds = items_dataset(3);
  CHECK_NOTHROW(ds.validate());
  ds.items[2].id = ds.items[0].id;
  CHECK_THROWS_AS(ds.validate(), ConfigError);
  ds = items_dataset(3);
  ds.items[1].features = Tensor::zeros({2, 1, 1});
  CHECK_THROWS_AS(ds.validate(), ConfigError);
}

TEST_CASE("split_dataset") {
  for (const auto& item : split_dataset(items_dataset(17), {1, 0, 0}, 3).items) CHECK(item.split == Split::train);

  const auto ds = split_dataset(items_dataset(100), {0.8, 0.1, 0.1}, 42);
  CHECK(ds.subset(Split::train).size() == 80);
  CHECK(ds.subset(Split::val).size() == 10);
  CHECK(ds.subset(Split::test).size() == 10);

  const auto again = split_dataset(items_dataset(100), {0.8, 0.1, 0.1}, 42);
  const auto other = split_dataset(items_dataset(100), {0.8, 0.1, 0.1}, 43);
  bool differs = false;
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(ds.items[i].split == again.items[i].split);
    differs |= ds.items[i].split != other.items[i].split;
  }
  CHECK(differs);

  CHECK_THROWS_AS(split_dataset(items_dataset(10), {0.8, 0.1, 0.2}, 0), ConfigError);
  CHECK_THROWS_AS(split_dataset(items_dataset(10), {1.1, -0.1, 0.0}, 0), ConfigError);
  CHECK_NOTHROW(split_dataset(items_dataset(10), {0.7, 0.2, 0.1 + 1e-10}, 0));
}

TEST_CASE("splits partition the items") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(60);
    const double a = rng.uniform(), b = rng.uniform() * (1 - a);
    const auto ds = split_dataset(items_dataset(n), {a, b, 1 - a - b}, rng.below(1000));
    std::set<std::string> seen;
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (const auto* item : ds.subset(s)) CHECK(seen.insert(item->id).second);
    }
    CHECK(seen.size() == n);
    CHECK(ds.subset(Split::train).size() == std::min<std::size_t>(n, std::llround(a * static_cast<double>(n))));
  }
}

TEST_CASE("split names") {
  for (Split s : {Split::train, Split::val, Split::test}) CHECK(parse_split(split_name(s)) == s);
  CHECK_THROWS_AS(parse_split("dev"), ConfigError);
}

TEST_CASE("synthetic data is deterministic") {
  TempDir dir("synth");
  const SynthSpec spec{.n_items = 30, .channels = 8, .spatial = 4, .seed = 7};
  save_dataset(dir / "a", generate_synthetic(spec).dataset);
  save_dataset(dir / "b", generate_synthetic(spec).dataset);
  for (const char* f : {"features.ftns", "labels.csv", "splits.csv"}) {
    CHECK(file_bytes(dir / "a" / f) == file_bytes(dir / "b" / f));
  }
  auto other = spec;
  other.seed = 8;
  save_dataset(dir / "c", generate_synthetic(other).dataset);
  CHECK(file_bytes(dir / "a" / "labels.csv") != file_bytes(dir / "c" / "labels.csv"));
}

TEST_CASE("synthetic labels satisfy label invariants") {
  const SynthSpec spec{.n_items = 200, .channels = 16, .spatial = 5, .seed = 2, .n_obs = 37};
  const auto synth = generate_synthetic(spec);
  REQUIRE(synth.dataset.items.size() == 200);
  CHECK_NOTHROW(synth.dataset.validate());
  CHECK(synth.dataset.feature_shape() == Shape{16, 5, 5});
  for (std::size_t i = 0; i < 200; ++i) {
    const auto& item = synth.dataset.items[i];
    REQUIRE(item.label.votes.has_value());
    std::uint64_t total = 0;
    for (auto c : *item.label.votes) total += c;
    CHECK(total == 37);
    CHECK(item.label.n_obs == 37);
    CHECK_NOTHROW(validate_label(item.label));
    const auto derived = label_from_votes(*item.label.votes, item.id);
    CHECK(std::abs(derived.mu - item.label.mu) < 1e-9);
    CHECK(std::abs(derived.sigma - item.label.sigma) < 1e-9);
    CHECK(synth.latent_mu[i] >= 1.5);
    CHECK(synth.latent_mu[i] <= 9.5);
    CHECK(synth.latent_sigma[i] > 0.3);
    CHECK(synth.latent_sigma[i] < 2.5);
    for (double v : item.features.data()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(synth.dataset.items.front().id == "s000");
}

TEST_CASE("synthetic mean approaches the latent mean") {
  const auto synth = generate_synthetic({.n_items = 50, .channels = 16, .spatial = 5, .seed = 11, .n_obs = 10000});
  double gap = 0.0;
  for (std::size_t i = 0; i < 50; ++i) gap += std::abs(synth.dataset.items[i].label.mu - synth.latent_mu[i]);
  CHECK(gap / 50 < 0.05);
}

TEST_CASE("SynthSpec validation") {
  CHECK_THROWS_AS(generate_synthetic({.n_items = 0}), ConfigError);
  CHECK_THROWS_AS(generate_synthetic({.n_obs = 0}), ConfigError);
  CHECK_THROWS_AS(generate_synthetic({.sigma_min = 2.0, .sigma_max = 1.0}), ConfigError);
  const auto kv = SynthSpec{}.to_kv();
  CHECK(kv.get("n_obs") == "210");
  CHECK(kv.get_double("sigma_max") == 2.5);
}

TEST_CASE("key=value records") {
  Rng rng(12);
  for (int i = 0; i < 2000; ++i) {
    const double v = rng.normal(0.0, 1.0) * std::pow(10.0, rng.uniform(-300, 300));
    CHECK(parse_double(format_double(v), "v") == v);
  }
  for (double v : {0.0, -0.0, 5e-324, -2.2250738585072014e-308, 1.7976931348623157e308}) {
    CHECK(std::signbit(parse_double(format_double(v), "v")) == std::signbit(v));
    CHECK(parse_double(format_double(v), "v") == v);
  }
  CHECK(format_double(0.6) == "0.6");
  CHECK(format_double(1e-4) == "1e-04");
  CHECK(std::isinf(parse_double(format_double(-INFINITY), "v")));
  CHECK_THROWS_AS(parse_double("", "v"), ConfigError);
  CHECK_THROWS_AS(parse_double(" 1", "v"), ConfigError);
  CHECK_THROWS_AS(parse_double("1.5x", "v"), ConfigError);
  CHECK_THROWS_AS(parse_size("-1", "n"), ConfigError);

  KeyValues kv;
  kv.set("a", 0.1);
  kv.set("b", "two words");
  kv.set("a", std::size_t{3});
  CHECK(kv.to_block() == "a=3\nb=two words\n");
  CHECK(kv.to_line() == "a=3 b=two words");
  const auto back = KeyValues::parse_block("# comment\n\na=3\nb=two words\n");
  CHECK(back.entries() == kv.entries());
  CHECK_THROWS_AS(kv.get("c"), ConfigError);
}
