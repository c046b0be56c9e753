#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "rl4rec/error.hpp"
#include "rl4rec/rng.hpp"

namespace rl4rec::data {

using UserId = std::size_t;
using ItemId = std::size_t;

struct InteractionRecord {
  UserId user = 0;
  ItemId item = 0;
  double reward = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

/// Per-user chronological order; identical timestamps resolve by item id.
inline bool chronological(const InteractionRecord& a, const InteractionRecord& b) {
  if (a.user != b.user) return a.user < b.user;
  if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
  return a.item < b.item;
}

struct ItemCatalog {
  std::size_t n_items = 0;
  std::vector<int> category;       // one label per item
  std::vector<double> popularity;  // empirical train frequency, sums to 1
  bool has_categories = false;     // false: category[i] == i
  std::size_t train_size = 0;      // |train log|, used for the novelty floor

  static ItemCatalog build(std::size_t n_items, std::vector<int> categories,
                           const std::vector<InteractionRecord>& train) {
    ItemCatalog c;
    c.n_items = n_items;
    c.has_categories = !categories.empty();
    if (c.has_categories) {
      RL4REC_EXPECT(categories.size() == n_items, "catalog: one category per item required");
      c.category = std::move(categories);
    } else {
      c.category.resize(n_items);
      for (std::size_t i = 0; i < n_items; ++i) c.category[i] = static_cast<int>(i);
    }
    c.popularity.assign(n_items, 0.0);
    for (const auto& r : train) c.popularity.at(r.item) += 1.0;
    c.train_size = train.size();
    if (!train.empty())
      for (double& p : c.popularity) p /= static_cast<double>(train.size());
    return c;
  }
};

struct Dataset {
  std::string name;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  double reward_min = 0.0;
  double reward_max = 1.0;
  std::vector<InteractionRecord> train;
  std::vector<InteractionRecord> test;
  ItemCatalog catalog;
};

// ---------------------------------------------------------------------------
// Descriptor: "key = value" lines, '#' starts a comment. Paths are relative to
// the descriptor's directory.

struct DatasetDescriptor {
  std::filesystem::path base_dir;
  std::map<std::string, std::string> values;

  bool has(const std::string& k) const { return values.count(k) != 0; }
  std::string get(const std::string& k) const {
    auto it = values.find(k);
    if (it == values.end()) throw FormatError("dataset descriptor lacks key '" + k + "'");
    return it->second;
  }
  std::string get_or(const std::string& k, const std::string& fallback) const {
    auto it = values.find(k);
    return it == values.end() ? fallback : it->second;
  }
  std::filesystem::path path(const std::string& k) const {
    std::filesystem::path p = get(k);
    return p.is_absolute() ? p : base_dir / p;
  }
};

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline double parse_double(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw FormatError("cannot parse number '" + s + "' for " + what);
  return v;
}

inline std::int64_t parse_int(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
    throw FormatError("cannot parse integer '" + s + "' for " + what);
  return v;
}

inline DatasetDescriptor read_descriptor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset descriptor " + path.string());
  DatasetDescriptor d;
  d.base_dir = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    d.values[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return d;
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, delim)) out.push_back(trim(field));
  if (!line.empty() && line.back() == delim) out.emplace_back();
  return out;
}

namespace detail {

struct RawRecord {
  std::string user, item;
  double reward;
  std::int64_t timestamp;
};

/// Maps raw string ids onto [0, n). Numeric ids sort numerically.
class IdMap {
 public:
  void add(const std::string& raw) { raw_.push_back(raw); }
  void finalize() {
    std::sort(raw_.begin(), raw_.end(), [](const std::string& a, const std::string& b) {
      std::int64_t x = 0, y = 0;
      const bool na = std::from_chars(a.data(), a.data() + a.size(), x).ec == std::errc();
      const bool nb = std::from_chars(b.data(), b.data() + b.size(), y).ec == std::errc();
      if (na && nb && x != y) return x < y;
      if (na != nb) return na;
      return a < b;
    });
    raw_.erase(std::unique(raw_.begin(), raw_.end()), raw_.end());
    for (std::size_t i = 0; i < raw_.size(); ++i) index_[raw_[i]] = i;
  }
  std::size_t size() const { return raw_.size(); }
  std::optional<std::size_t> find(const std::string& raw) const {
    auto it = index_.find(raw);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> raw_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline char delimiter_of(const DatasetDescriptor& d) {
  const std::string v = d.get_or("delimiter", ",");
  if (v == "tab" || v == "\\t") return '\t';
  if (v.size() != 1) throw FormatError("delimiter must be a single character or 'tab'");
  return v[0];
}

inline std::vector<RawRecord> read_csv_split(const DatasetDescriptor& d, const std::string& key) {
  const auto path = d.path(key);
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + key + " file " + path.string());
  const char delim = delimiter_of(d);
  std::string header;
  if (!std::getline(in, header)) throw DataError(key + " file is empty: " + path.string());
  const auto names = split_line(header, delim);
  auto column = [&](const std::string& col_key, bool required) -> std::optional<std::size_t> {
    if (!d.has(col_key)) {
      if (required) throw FormatError("descriptor lacks " + col_key);
      return std::nullopt;
    }
    const std::string name = d.get(col_key);
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      throw FormatError("column '" + name + "' missing from " + path.string());
    return static_cast<std::size_t>(it - names.begin());
  };
  const std::size_t cu = *column("user_column", true);
  const std::size_t ci = *column("item_column", true);
  const std::size_t cr = *column("reward_column", true);
  const auto ct = column("timestamp_column", false);

  std::vector<RawRecord> out;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_line(line, delim);
    const std::size_t need = std::max({cu, ci, cr, ct.value_or(0)});
    if (f.size() <= need)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": too few fields");
    RawRecord r;
    r.user = f[cu];
    r.item = f[ci];
    r.reward = parse_double(f[cr], "reward");
    r.timestamp = ct ? parse_int(f[*ct], "timestamp") : static_cast<std::int64_t>(out.size());
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<std::vector<double>> read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<double> row;
    std::string tok;
    while (ss >> tok) row.push_back(parse_double(tok, path.filename().string()));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Original Coat release: dense user x item rating matrices (0 = missing) and
/// one-hot item features. Category is the argmax within the feature columns
/// [category_first, category_last) (default: the whole row).
inline Dataset load_coat_ascii(const DatasetDescriptor& d) {
  Dataset ds;
  ds.name = d.get_or("name", "coat");
  auto read_split = [&](const std::string& key) {
    auto m = detail::read_matrix(d.path(key));
    std::vector<InteractionRecord> recs;
    for (std::size_t u = 0; u < m.size(); ++u)
      for (std::size_t i = 0; i < m[u].size(); ++i)
        if (m[u][i] != 0.0)
          recs.push_back({u, i, m[u][i], static_cast<std::int64_t>(recs.size())});
    ds.n_users = std::max(ds.n_users, m.size());
    if (!m.empty()) ds.n_items = std::max(ds.n_items, m.front().size());
    return recs;
  };
  ds.train = read_split("train");
  ds.test = read_split("test");
  std::vector<int> categories;
  if (d.has("item_features")) {
    auto feats = detail::read_matrix(d.path("item_features"));
    if (feats.size() != ds.n_items) throw FormatError("item_features must have one row per item");
    const std::size_t first = static_cast<std::size_t>(parse_int(d.get_or("category_first", "0"), "category_first"));
    for (const auto& row : feats) {
      const std::size_t last = d.has("category_last")
                                   ? static_cast<std::size_t>(parse_int(d.get("category_last"), "category_last"))
                                   : row.size();
      if (first >= last || last > row.size()) throw FormatError("bad category column range");
      auto it = std::max_element(row.begin() + first, row.begin() + last);
      categories.push_back(static_cast<int>(it - (row.begin() + first)));
    }
  }
  ds.reward_min = parse_double(d.get_or("reward_min", "1"), "reward_min");
  ds.reward_max = parse_double(d.get_or("reward_max", "5"), "reward_max");
  if (ds.train.empty() || ds.test.empty()) throw DataError("coat: empty train or test split");
  ds.catalog = ItemCatalog::build(ds.n_items, std::move(categories), ds.train);
  return ds;
}

/// Loads train/test splits and the optional category file named by a
/// descriptor. When the descriptor declares n_users / n_items the raw ids
/// must already be dense integers in range; otherwise they are re-indexed
/// densely (numeric order when numeric).
inline Dataset load_dataset(const DatasetDescriptor& d) {
  if (d.get_or("format", "csv") == "coat_ascii") return load_coat_ascii(d);

  auto train_raw = detail::read_csv_split(d, "train");
  auto test_raw = detail::read_csv_split(d, "test");
  if (train_raw.empty()) throw DataError("train split is empty");
  if (test_raw.empty()) throw DataError("test split is empty");

  std::vector<std::pair<std::string, std::string>> cat_raw;
  if (d.has("categories")) {
    const auto path = d.path("categories");
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open category file " + path.string());
    const char delim = detail::delimiter_of(d);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      auto f = split_line(line, delim);
      if (f.size() < 2) throw FormatError("category file lines need item_id and category");
      if (first) {
        first = false;
        std::int64_t probe;
        if (std::from_chars(f[0].data(), f[0].data() + f[0].size(), probe).ec != std::errc())
          continue;  // header row
      }
      cat_raw.emplace_back(f[0], f[1]);
    }
  }

  const bool declared = d.has("n_users") && d.has("n_items");
  Dataset ds;
  ds.name = d.get_or("name", d.base_dir.filename().string());
  detail::IdMap users, items, cats;
  if (declared) {
    ds.n_users = static_cast<std::size_t>(parse_int(d.get("n_users"), "n_users"));
    ds.n_items = static_cast<std::size_t>(parse_int(d.get("n_items"), "n_items"));
  } else {
    for (const auto* split : {&train_raw, &test_raw})
      for (const auto& r : *split) {
        users.add(r.user);
        items.add(r.item);
      }
    for (const auto& [item, _] : cat_raw) items.add(item);
    users.finalize();
    items.finalize();
    ds.n_users = users.size();
    ds.n_items = items.size();
  }

  auto resolve = [&](const std::string& raw, detail::IdMap& map, std::size_t n,
                     const char* what) -> std::size_t {
    if (!declared) return *map.find(raw);
    const std::int64_t v = parse_int(raw, what);
    if (v < 0 || static_cast<std::size_t>(v) >= n)
      throw FormatError(std::string(what) + " " + raw + " outside [0, " + std::to_string(n) + ")");
    return static_cast<std::size_t>(v);
  };
  auto convert = [&](const std::vector<detail::RawRecord>& raw) {
    std::vector<InteractionRecord> out;
    out.reserve(raw.size());
    for (const auto& r : raw)
      out.push_back({resolve(r.user, users, ds.n_users, "user_id"),
                     resolve(r.item, items, ds.n_items, "item_id"), r.reward, r.timestamp});
    std::stable_sort(out.begin(), out.end(), chronological);
    return out;
  };
  ds.train = convert(train_raw);
  ds.test = convert(test_raw);

  std::vector<int> categories;
  if (!cat_raw.empty()) {
    for (const auto& [_, c] : cat_raw) cats.add(c);
    cats.finalize();
    categories.assign(ds.n_items, -1);
    for (const auto& [item, c] : cat_raw)
      categories[resolve(item, items, ds.n_items, "item_id")] = static_cast<int>(*cats.find(c));
    for (std::size_t i = 0; i < ds.n_items; ++i)
      if (categories[i] < 0) throw DataError("item " + std::to_string(i) + " has no category");
  }

  double lo = train_raw.front().reward, hi = lo;
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& r : *split) {
      lo = std::min(lo, r.reward);
      hi = std::max(hi, r.reward);
    }
  ds.reward_min = d.has("reward_min") ? parse_double(d.get("reward_min"), "reward_min") : lo;
  ds.reward_max = d.has("reward_max") ? parse_double(d.get("reward_max"), "reward_max") : hi;
  if (!(ds.reward_min <= ds.reward_max)) throw FormatError("reward_min exceeds reward_max");
  ds.catalog = ItemCatalog::build(ds.n_items, std::move(categories), ds.train);
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& descriptor_path) {
  return load_dataset(read_descriptor(descriptor_path));
}

/// Writes the dataset as CSV splits, a category file and a descriptor that
/// load_dataset() reads back.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write_split = [&](const std::string& file, const std::vector<InteractionRecord>& recs) {
    std::ofstream out(dir / file);
    if (!out) throw FormatError("cannot write " + (dir / file).string());
    out.precision(17);
    out << "user_id,item_id,rating,timestamp\n";
    for (const auto& r : recs)
      out << r.user << ',' << r.item << ',' << r.reward << ',' << r.timestamp << '\n';
  };
  write_split("train.csv", ds.train);
  write_split("test.csv", ds.test);
  {
    std::ofstream out(dir / "categories.csv");
    out << "item_id,category\n";
    for (std::size_t i = 0; i < ds.n_items; ++i) out << i << ',' << ds.catalog.category[i] << '\n';
  }
  std::ofstream out(dir / "dataset.desc");
  out.precision(17);
  out << "name = " << ds.name << "\nformat = csv\ntrain = train.csv\ntest = test.csv\n"
      << "categories = categories.csv\ndelimiter = ,\nuser_column = user_id\n"
      << "item_column = item_id\nreward_column = rating\ntimestamp_column = timestamp\n"
      << "n_users = " << ds.n_users << "\nn_items = " << ds.n_items << '\n'
      << "reward_min = " << ds.reward_min << "\nreward_max = " << ds.reward_max << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthConfig {
  std::size_t users = 100;
  std::size_t items = 50;
  std::size_t rank = 2;
  double noise = 0.0;
  std::uint64_t seed = 1;
  double density = 0.3;        // fraction of the matrix observed
  double test_fraction = 0.0;  // share of observed pairs placed in test
  std::size_t categories = 5;
};

/// Low-rank matrix r(u,i) = a_u . b_i with factors uniform in [0.5, 1.5]
/// (plus optional Gaussian noise); observed pairs chosen uniformly.
inline Dataset generate_synthetic(const SynthConfig& cfg) {
  if (cfg.users == 0 || cfg.items == 0 || cfg.rank == 0) throw ConfigError("synthetic sizes must be positive");
  if (cfg.density <= 0.0 || cfg.density > 1.0) throw ConfigError("density must be in (0, 1]");
  Rng rng(cfg.seed);
  std::vector<double> a(cfg.users * cfg.rank), b(cfg.items * cfg.rank);
  for (double& v : a) v = rng.uniform(0.5, 1.5);
  for (double& v : b) v = rng.uniform(0.5, 1.5);
  std::vector<int> categories(cfg.items);
  for (auto& c : categories) c = static_cast<int>(rng.uniform_int(std::max<std::size_t>(cfg.categories, 1)));

  Dataset ds;
  ds.name = "synthetic";
  ds.n_users = cfg.users;
  ds.n_items = cfg.items;
  const auto per_user = static_cast<std::size_t>(std::llround(cfg.density * cfg.items));
  std::vector<std::size_t> order(cfg.items);
  for (std::size_t u = 0; u < cfg.users; ++u) {
    for (std::size_t i = 0; i < cfg.items; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t k = 0; k < std::max<std::size_t>(per_user, 1); ++k) {
      const std::size_t i = order[k];
      double r = 0.0;
      for (std::size_t f = 0; f < cfg.rank; ++f) r += a[u * cfg.rank + f] * b[i * cfg.rank + f];
      if (cfg.noise > 0.0) r += rng.normal(0.0, cfg.noise);
      InteractionRecord rec{u, i, r, static_cast<std::int64_t>(k)};
      (rng.bernoulli(cfg.test_fraction) ? ds.test : ds.train).push_back(rec);
    }
  }
  std::stable_sort(ds.train.begin(), ds.train.end(), chronological);
  std::stable_sort(ds.test.begin(), ds.test.end(), chronological);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& r : *split) {
      lo = std::min(lo, r.reward);
      hi = std::max(hi, r.reward);
    }
  ds.reward_min = lo;
  ds.reward_max = hi;
  ds.catalog = ItemCatalog::build(ds.n_items, std::move(categories), ds.train);
  return ds;
}

struct CoatLikeConfig {
  std::uint64_t seed = 2023;
  std::size_t users = 290;
  std::size_t items = 300;
  std::size_t train_per_user = 24;
  std::size_t test_per_user = 16;
  std::size_t categories = 8;
  std::size_t rank = 4;
  // Strength of self-selection for the training split: P(pick) ~ exp(k * score).
  double selection_strength = 1.2;
};

/// Coat-shaped data: integer ratings 1..5, a training split whose items were
/// self-selected by users (missing not at random, biased towards liked items)
/// and a test split of uniformly random items.
inline Dataset generate_coat_like(const CoatLikeConfig& cfg = {}) {
  Rng rng(cfg.seed);
  const std::size_t U = cfg.users, I = cfg.items, K = cfg.rank, C = cfg.categories;
  if (cfg.train_per_user + cfg.test_per_user > I) throw ConfigError("coat-like: too many ratings per user");
  std::vector<int> category(I);
  for (auto& c : category) c = static_cast<int>(rng.uniform_int(C));
  std::vector<double> item_bias(I), user_bias(U), p(U * K), q(I * K), affinity(U * C);
  for (double& v : item_bias) v = rng.normal(0.0, 0.5);
  for (double& v : user_bias) v = rng.normal(0.0, 0.4);
  for (double& v : p) v = rng.normal(0.0, 0.5);
  for (double& v : q) v = rng.normal(0.0, 0.5);
  for (double& v : affinity) v = rng.normal(0.0, 0.6);

  Dataset ds;
  ds.name = "coat-like";
  ds.n_users = U;
  ds.n_items = I;
  ds.reward_min = 1.0;
  ds.reward_max = 5.0;
  std::vector<double> score(I), weight(I);
  for (std::size_t u = 0; u < U; ++u) {
    for (std::size_t i = 0; i < I; ++i) {
      double s = 2.5 + user_bias[u] + item_bias[i] + affinity[u * C + category[i]];
      for (std::size_t k = 0; k < K; ++k) s += p[u * K + k] * q[i * K + k];
      score[i] = s;
    }
    auto rating = [&](std::size_t i) {
      return std::clamp(std::round(score[i] + rng.normal(0.0, 0.3)), 1.0, 5.0);
    };
    for (std::size_t i = 0; i < I; ++i) weight[i] = std::exp(cfg.selection_strength * score[i]);
    std::vector<ItemId> picked;
    for (std::size_t k = 0; k < cfg.train_per_user; ++k) {
      const std::size_t i = rng.categorical(weight);
      weight[i] = 0.0;
      picked.push_back(i);
    }
    for (std::size_t k = 0; k < picked.size(); ++k)
      ds.train.push_back({u, picked[k], rating(picked[k]), static_cast<std::int64_t>(k)});
    std::vector<ItemId> rest;
    for (std::size_t i = 0; i < I; ++i)
      if (weight[i] != 0.0) rest.push_back(i);
    rng.shuffle(rest);
    for (std::size_t k = 0; k < cfg.test_per_user; ++k)
      ds.test.push_back({u, rest[k], rating(rest[k]),
                         static_cast<std::int64_t>(cfg.train_per_user + k)});
  }
  std::stable_sort(ds.train.begin(), ds.train.end(), chronological);
  std::stable_sort(ds.test.begin(), ds.test.end(), chronological);
  ds.catalog = ItemCatalog::build(I, std::move(category), ds.train);
  return ds;
}

}  // namespace rl4rec::data
