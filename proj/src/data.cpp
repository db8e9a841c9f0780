#include "mtci/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mtci/error.hpp"
#include "mtci/rng.hpp"

namespace mtci {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// FTNS container

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'F', 'T', 'N', 'S'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated payload while reading ") + what, pos_);
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensors(std::span<const TensorEntry> entries) {
  std::set<std::string> names;
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kFtnsVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw FormatError("duplicate tensor name '" + e.name + "'", out.size());
    if (shape_numel(e.shape) != e.data.size()) {
      throw ShapeError("tensor '" + e.name + "' shape " + shape_to_string(e.shape) +
                       " does not match its " + std::to_string(e.data.size()) + " values");
    }
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto extent : e.shape) put_u32(out, static_cast<std::uint32_t>(extent));
    for (double v : e.data) put_f64(out, v);
  }
  return out;
}

std::vector<TensorEntry> decode_tensors(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) throw FormatError("bad magic", 0);
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kFtnsVersion) {
    throw FormatError("unsupported version " + std::to_string(version), version_at);
  }
  const auto count = r.u32("entry count");

  std::vector<TensorEntry> entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto entry_at = r.offset();
    TensorEntry e;
    const auto name_len = r.u32("name length");
    const auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    if (!names.insert(e.name).second) throw FormatError("duplicate tensor name '" + e.name + "'", entry_at);
    const auto rank = r.u32("rank");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto extent_at = r.offset();
      const auto extent = r.u32("extent");
      if (extent == 0) throw FormatError("zero extent in '" + e.name + "'", extent_at);
      e.shape.push_back(extent);
      n *= extent;
    }
    if (n > (bytes.size() - r.offset()) / 8) {
      throw FormatError("truncated payload for '" + e.name + "'", r.offset());
    }
    e.data.reserve(n);
    for (std::size_t k = 0; k < n; ++k) e.data.push_back(r.f64());
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after last entry", r.offset());
  return entries;
}

void write_tensor_file(const fs::path& path, std::span<const TensorEntry> entries) {
  const auto bytes = encode_tensors(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::vector<TensorEntry> read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

TensorEntry text_entry(std::string name, std::string_view text) {
  TensorEntry e{std::move(name), {text.size()}, {}};
  for (unsigned char c : text) e.data.push_back(c);
  return e;
}

std::string entry_text(const TensorEntry& entry) {
  std::string s;
  for (double v : entry.data) {
    if (!(v >= 0 && v <= 255 && v == std::floor(v))) {
      throw ConfigError(entry.name, "entry does not hold byte values");
    }
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Label table

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::int64_t parse_int(const std::string& s, const char* what, std::size_t row) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError(std::string(what) + " is not an integer: '" + s + "'", row);
}

double parse_real(const std::string& s, const char* what, std::size_t row) {
  try {
    const double v = parse_double(s, what);
    if (std::isfinite(v)) return v;
  } catch (const ConfigError&) {
  }
  throw ParseError(std::string(what) + " is not a finite number: '" + s + "'", row);
}

}  // namespace

std::vector<ScoreLabel> parse_labels(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);

  std::vector<std::string> votes_header{"id", "n_obs"};
  for (std::size_t b = 1; b <= kScoreBins; ++b) votes_header.push_back("v" + std::to_string(b));
  const std::vector<std::string> direct_header{"id", "n_obs", "mu", "sigma"};
  const bool histogram = header == votes_header;
  if (!histogram && header != direct_header) {
    throw ParseError("header must be 'id,n_obs,mu,sigma' or 'id,n_obs,v1,...,v10', got '" + line + "'", 1);
  }

  std::vector<ScoreLabel> labels;
  std::set<std::string> ids;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(f.size()), row);
    }
    if (f[0].empty()) throw ParseError("empty id", row);
    if (!ids.insert(f[0]).second) throw ParseError("duplicate id '" + f[0] + "'", row);
    const auto n_obs = parse_int(f[1], "n_obs", row);
    if (n_obs < 1) throw ParseError("n_obs must be >= 1", row);

    ScoreLabel label;
    if (histogram) {
      VoteHistogram votes{};
      std::int64_t total = 0;
      for (std::size_t b = 0; b < kScoreBins; ++b) {
        const auto c = parse_int(f[2 + b], "vote count", row);
        if (c < 0) throw ParseError("negative vote count in v" + std::to_string(b + 1), row);
        votes[b] = static_cast<std::uint64_t>(c);
        total += c;
      }
      if (total != n_obs) {
        throw ParseError("n_obs " + std::to_string(n_obs) + " differs from vote total " +
                         std::to_string(total), row);
      }
      label = label_from_votes(votes, f[0]);
    } else {
      label.item_id = f[0];
      label.n_obs = static_cast<std::uint64_t>(n_obs);
      label.mu = parse_real(f[2], "mu", row);
      label.sigma = parse_real(f[3], "sigma", row);
      if (label.sigma < 0) throw ParseError("sigma must be >= 0", row);
    }
    labels.push_back(std::move(label));
  }
  return labels;
}

std::vector<ScoreLabel> load_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return parse_labels(in);
}

void write_labels(const fs::path& path, std::span<const ScoreLabel> labels) {
  const bool histogram =
      std::all_of(labels.begin(), labels.end(), [](const auto& l) { return l.votes.has_value(); });
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  if (histogram) {
    out << "id,n_obs";
    for (std::size_t b = 1; b <= kScoreBins; ++b) out << ",v" << b;
    out << '\n';
    for (const auto& l : labels) {
      out << l.item_id << ',' << l.n_obs;
      for (auto c : *l.votes) out << ',' << c;
      out << '\n';
    }
  } else {
    out << "id,n_obs,mu,sigma\n";
    for (const auto& l : labels) {
      out << l.item_id << ',' << l.n_obs << ',' << format_double(l.mu) << ','
          << format_double(l.sigma) << '\n';
    }
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Datasets

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("split", "unknown split '" + name + "' (expected train, val or test)");
}

void Dataset::validate() const {
  std::set<std::string> ids;
  for (const auto& item : items) {
    if (!ids.insert(item.id).second) throw ConfigError("id", "duplicate item id '" + item.id + "'");
    if (item.label.item_id != item.id) throw ConfigError("id", "label/feature id mismatch for '" + item.id + "'");
    if (item.features.shape() != items.front().features.shape()) {
      throw ConfigError("features", "'" + item.id + "' has shape " +
                                        shape_to_string(item.features.shape()) + ", expected " +
                                        shape_to_string(items.front().features.shape()));
    }
    validate_label(item.label);
  }
}

std::vector<const DatasetItem*> Dataset::subset(Split s) const {
  std::vector<const DatasetItem*> out;
  for (const auto& item : items)
    if (item.split == s) out.push_back(&item);
  return out;
}

const Shape& Dataset::feature_shape() const {
  if (items.empty()) throw ConfigError("items", "dataset is empty");
  return items.front().features.shape();
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  std::vector<TensorEntry> features;
  std::vector<ScoreLabel> labels;
  for (const auto& item : ds.items) {
    features.push_back({item.id, item.features.shape(),
                        {item.features.data().begin(), item.features.data().end()}});
    labels.push_back(item.label);
  }
  write_tensor_file(dir / "features.ftns", features);
  write_labels(dir / "labels.csv", labels);
  std::ofstream splits(dir / "splits.csv", std::ios::trunc);
  if (!splits) throw Error("cannot open '" + (dir / "splits.csv").string() + "' for writing");
  splits << "id,split\n";
  for (const auto& item : ds.items) splits << item.id << ',' << split_name(item.split) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  const auto features = read_tensor_file(dir / "features.ftns");
  const auto labels = load_labels(dir / "labels.csv");

  std::map<std::string, Split> splits;
  if (fs::exists(dir / "splits.csv")) {
    std::ifstream in(dir / "splits.csv");
    std::string line;
    std::getline(in, line);
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto f = split_csv(line);
      if (f.size() != 2) throw ParseError("splits.csv: expected id,split", row);
      try {
        splits[f[0]] = parse_split(f[1]);
      } catch (const ConfigError& e) {
        throw ParseError(std::string("splits.csv: ") + e.what(), row);
      }
    }
  }

  std::map<std::string, const ScoreLabel*> by_id;
  for (const auto& l : labels) by_id[l.item_id] = &l;
  if (features.size() != labels.size()) {
    throw ConfigError("labels", std::to_string(features.size()) + " feature tensors but " +
                                    std::to_string(labels.size()) + " labels");
  }

  Dataset ds;
  for (const auto& e : features) {
    auto it = by_id.find(e.name);
    if (it == by_id.end()) throw ConfigError("labels", "no label for feature '" + e.name + "'");
    DatasetItem item{e.name, Tensor::from_data(e.shape, e.data), *it->second, Split::train};
    if (auto s = splits.find(e.name); s != splits.end()) item.split = s->second;
    ds.items.push_back(std::move(item));
  }
  if (!ds.items.empty() && ds.items.front().features.rank() != 3) {
    throw ConfigError("features", "feature tensors must be [C x H x W]");
  }
  ds.validate();
  return ds;
}

Dataset split_dataset(Dataset ds, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("fractions", "must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("fractions", "must sum to 1, got " + format_double(total));
  }
  const std::size_t n = ds.items.size();
  const auto n_train = std::min<std::size_t>(n, std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = std::min<std::size_t>(n - n_train, std::llround(fractions[1] * static_cast<double>(n)));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span(order));
  for (std::size_t k = 0; k < n; ++k) {
    ds.items[order[k]].split = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SynthSpec::validate() const {
  if (n_items < 1) throw ConfigError("n", "must be >= 1");
  if (channels < 1) throw ConfigError("channels", "must be >= 1");
  if (spatial < 1) throw ConfigError("spatial", "must be >= 1");
  if (n_obs < 1) throw ConfigError("n_obs", "must be >= 1");
  if (!(sigma_min > 0 && sigma_max > sigma_min)) {
    throw ConfigError("sigma_min", "need 0 < sigma_min < sigma_max");
  }
}

KeyValues SynthSpec::to_kv() const {
  KeyValues kv;
  kv.set("n_items", n_items);
  kv.set("channels", channels);
  kv.set("spatial", spatial);
  kv.set("seed", std::to_string(seed));
  kv.set("n_obs", std::to_string(n_obs));
  kv.set("mu_center", mu_center);
  kv.set("mu_spread", mu_spread);
  kv.set("sigma_min", sigma_min);
  kv.set("sigma_max", sigma_max);
  kv.set("score_bins", "1..10");
  return kv;
}

SyntheticData generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t C = spec.channels, hw = spec.spatial * spec.spatial;
  std::vector<double> w_mu(C), w_sigma(C);
  for (auto& w : w_mu) w = rng.uniform(-1.0, 1.0);
  for (auto& w : w_sigma) w = rng.uniform(-1.0, 1.0);
  const double k = std::sqrt(9.0 * static_cast<double>(hw) / static_cast<double>(C));

  const std::size_t id_width = std::to_string(spec.n_items - 1).size();
  SyntheticData out;
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    std::vector<double> values(C * hw);
    for (auto& v : values) v = rng.uniform(-1.0, 1.0);
    double dot_mu = 0.0, dot_sigma = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      double g = 0.0;
      for (std::size_t p = 0; p < hw; ++p) g += values[c * hw + p];
      g /= static_cast<double>(hw);
      dot_mu += w_mu[c] * g;
      dot_sigma += w_sigma[c] * g;
    }
    const double mu_star = std::clamp(spec.mu_center + spec.mu_spread * k * dot_mu, 1.5, 9.5);
    const double u = k * dot_sigma;
    const double softplus_u = std::max(u, 0.0) + std::log1p(std::exp(-std::abs(u)));
    const double sigma_star =
        spec.sigma_min + (spec.sigma_max - spec.sigma_min) * (1.0 - std::exp(-softplus_u));

    VoteHistogram votes{};
    for (std::uint64_t v = 0; v < spec.n_obs; ++v) {
      const double score = std::clamp(std::round(rng.normal(mu_star, sigma_star)), 1.0, 10.0);
      ++votes[static_cast<std::size_t>(score) - 1];
    }

    std::string id = std::to_string(i);
    id = "s" + std::string(id_width - id.size(), '0') + id;
    DatasetItem item{id, Tensor::from_data({C, spec.spatial, spec.spatial}, std::move(values)),
                     label_from_votes(votes, id), Split::train};
    out.dataset.items.push_back(std::move(item));
    out.latent_mu.push_back(mu_star);
    out.latent_sigma.push_back(sigma_star);
  }
  return out;
}

}  // namespace mtci
