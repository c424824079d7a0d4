#include "fedgrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string_view>
#include <tuple>
#include <unordered_map>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

bool interaction_less(const Interaction& a, const Interaction& b) {
  return std::tie(a.user, a.timestamp, a.item, a.rating) <
         std::tie(b.user, b.timestamp, b.item, b.rating);
}

void normalize(std::vector<Interaction>& rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Interaction& a, const Interaction& b) {
                     return std::tie(a.user, a.timestamp) <
                            std::tie(b.user, b.timestamp);
                   });
}

Dataset Dataset::with_interactions(std::vector<Interaction> rows) const {
  Dataset out;
  out.interactions = std::move(rows);
  out.n_users = n_users;
  out.n_items = n_items;
  out.user_features = user_features;
  out.item_features = item_features;
  out.user_ids = user_ids;
  out.item_ids = item_ids;
  return out;
}

void Dataset::validate() const {
  for (std::size_t r = 0; r < interactions.size(); ++r) {
    const auto& x = interactions[r];
    if (x.user >= n_users || x.item >= n_items)
      throw ContractError("interaction " + std::to_string(r) +
                          " references an index outside the vocabulary");
    if (!std::isfinite(x.rating) || x.timestamp < 0)
      throw ContractError("interaction " + std::to_string(r) +
                          " has a non-finite rating or negative timestamp");
    if (r > 0) {
      const auto& p = interactions[r - 1];
      if (std::tie(x.user, x.timestamp) < std::tie(p.user, p.timestamp))
        throw ContractError("interactions are not sorted by (user, timestamp)");
    }
  }
  for (const auto& f : user_features)
    if (f.values.size() != n_users)
      throw ContractError("user feature '" + f.name + "' has wrong length");
  for (const auto& f : item_features)
    if (f.values.size() != n_items)
      throw ContractError("item feature '" + f.name + "' has wrong length");
}

std::vector<std::size_t> user_counts(const Dataset& ds) {
  std::vector<std::size_t> counts(ds.n_users, 0);
  for (const auto& x : ds.interactions) ++counts[x.user];
  return counts;
}

// ---------------------------------------------------------------------------
// Text I/O

void IdMap::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < raw.size(); ++i) out << raw[i] << '\t' << i << '\n';
}

IdMap IdMap::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  IdMap map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos)
      throw ParseError(path.string(), lineno, "expected raw_id<TAB>dense_index");
    const auto idx = std::stoul(line.substr(tab + 1));
    if (idx != map.raw.size())
      throw ParseError(path.string(), lineno, "dense indices must be consecutive");
    map.raw.push_back(line.substr(0, tab));
  }
  return map;
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

Index intern(std::unordered_map<std::string, Index>& lookup, IdMap& map,
             std::string_view raw) {
  auto [it, inserted] =
      lookup.try_emplace(std::string(raw), static_cast<Index>(map.raw.size()));
  if (inserted) map.raw.emplace_back(raw);
  return it->second;
}

}  // namespace

Dataset load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());

  Dataset ds;
  std::unordered_map<std::string, Index> users, items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 4)
      throw ParseError(path.string(), lineno,
                       "expected 4 tab-separated fields, got " +
                           std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty())
      throw ParseError(path.string(), lineno, "empty user or item id");
    Interaction x;
    if (!parse_number(fields[2], x.rating) || !std::isfinite(x.rating))
      throw ParseError(path.string(), lineno,
                       "rating is not a finite number: '" +
                           std::string(fields[2]) + "'");
    if (!parse_number(fields[3], x.timestamp) || x.timestamp < 0)
      throw ParseError(path.string(), lineno,
                       "timestamp is not a non-negative integer: '" +
                           std::string(fields[3]) + "'");
    x.user = intern(users, ds.user_ids, fields[0]);
    x.item = intern(items, ds.item_ids, fields[1]);
    ds.interactions.push_back(x);
  }
  if (ds.interactions.empty())
    throw EmptyDatasetError(path.string() + " contains no interactions");
  ds.n_users = static_cast<Index>(ds.user_ids.raw.size());
  ds.n_items = static_cast<Index>(ds.item_ids.raw.size());
  normalize(ds.interactions);
  return ds;
}

void write_interactions(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (const auto& x : ds.interactions)
    out << x.user << '\t' << x.item << '\t' << x.rating << '\t' << x.timestamp
        << '\n';
}

// ---------------------------------------------------------------------------
// Filtering

namespace {

// Keeps the listed entities (ascending old index) and returns old->new map.
std::vector<Index> densify(const std::vector<bool>& keep, IdMap& ids,
                           std::vector<FeatureField>& features, Index& n) {
  std::vector<Index> remap(keep.size(), UINT32_MAX);
  IdMap new_ids;
  Index next = 0;
  for (std::size_t old = 0; old < keep.size(); ++old) {
    if (!keep[old]) continue;
    remap[old] = next++;
    if (old < ids.raw.size()) new_ids.raw.push_back(ids.raw[old]);
  }
  for (auto& f : features) {
    std::vector<Index> values;
    values.reserve(next);
    for (std::size_t old = 0; old < keep.size(); ++old)
      if (keep[old]) values.push_back(f.values[old]);
    f.values = std::move(values);
  }
  if (!ids.raw.empty()) ids = std::move(new_ids);
  n = next;
  return remap;
}

}  // namespace

Dataset filter_min_interactions(const Dataset& ds, std::size_t min_count,
                                std::size_t min_item_count) {
  if (min_count < 1 || min_item_count < 1)
    throw ConfigError("filter thresholds must be >= 1");

  std::vector<bool> alive(ds.interactions.size(), true);
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::size_t> uc(ds.n_users, 0), ic(ds.n_items, 0);
    for (std::size_t r = 0; r < alive.size(); ++r) {
      if (!alive[r]) continue;
      ++uc[ds.interactions[r].user];
      ++ic[ds.interactions[r].item];
    }
    for (std::size_t r = 0; r < alive.size(); ++r) {
      if (!alive[r]) continue;
      const auto& x = ds.interactions[r];
      if (uc[x.user] < min_count || ic[x.item] < min_item_count) {
        alive[r] = false;
        changed = true;
      }
    }
  }

  std::vector<bool> keep_user(ds.n_users, false), keep_item(ds.n_items, false);
  std::size_t kept = 0;
  for (std::size_t r = 0; r < alive.size(); ++r) {
    if (!alive[r]) continue;
    keep_user[ds.interactions[r].user] = true;
    keep_item[ds.interactions[r].item] = true;
    ++kept;
  }
  if (kept == 0)
    throw EmptyDatasetError("every user was removed by the interaction filter");

  Dataset out;
  out.user_ids = ds.user_ids;
  out.item_ids = ds.item_ids;
  out.user_features = ds.user_features;
  out.item_features = ds.item_features;
  const auto umap = densify(keep_user, out.user_ids, out.user_features, out.n_users);
  const auto imap = densify(keep_item, out.item_ids, out.item_features, out.n_items);
  out.interactions.reserve(kept);
  for (std::size_t r = 0; r < alive.size(); ++r) {
    if (!alive[r]) continue;
    auto x = ds.interactions[r];
    x.user = umap[x.user];
    x.item = imap[x.item];
    out.interactions.push_back(x);
  }
  normalize(out.interactions);
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

SplitSizes split_sizes(std::size_t n, SplitMode mode) {
  SplitSizes s;
  if (mode == SplitMode::kPerUser801010) {
    s.train = n * 8 / 10;
    s.validation = n / 10;
    s.test = n / 10;
    auto rem = n - s.train - s.validation - s.test;
    if (rem > 0) { ++s.validation; --rem; }
    if (rem > 0) { ++s.test; --rem; }
    s.train += rem;
  } else {
    s.test = n * 2 / 10;
    const auto rest = n - s.test;
    s.validation = rest / 10;
    s.train = rest - s.validation;
  }
  return s;
}

SplitBundle split(const Dataset& ds, std::uint64_t seed, SplitMode mode) {
  Rng rng(derive_seed(seed, "split"));
  std::vector<Interaction> train, val, test;
  const auto& rows = ds.interactions;
  std::size_t begin = 0;
  while (begin < rows.size()) {
    std::size_t end = begin;
    while (end < rows.size() && rows[end].user == rows[begin].user) ++end;
    std::vector<std::size_t> pos(end - begin);
    std::iota(pos.begin(), pos.end(), begin);
    shuffle(pos, rng);
    const auto sizes = split_sizes(pos.size(), mode);
    std::size_t j = 0;
    for (; j < sizes.train; ++j) train.push_back(rows[pos[j]]);
    for (; j < sizes.train + sizes.validation; ++j) val.push_back(rows[pos[j]]);
    for (; j < pos.size(); ++j) test.push_back(rows[pos[j]]);
    begin = end;
  }
  normalize(train);
  normalize(val);
  normalize(test);

  Rng tune_rng(derive_seed(seed, "tuning"));
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto n_tune = static_cast<std::size_t>(std::llround(0.1 * train.size()));
  for (std::size_t i = 0; i < n_tune; ++i) {
    const auto j = i + uniform_index(tune_rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n_tune);
  std::sort(idx.begin(), idx.end());
  std::vector<Interaction> tune;
  tune.reserve(n_tune);
  for (auto i : idx) tune.push_back(train[i]);

  SplitBundle b;
  b.train = ds.with_interactions(std::move(train));
  b.validation = ds.with_interactions(std::move(val));
  b.test = ds.with_interactions(std::move(test));
  b.tuning_subset = ds.with_interactions(std::move(tune));
  return b;
}

// ---------------------------------------------------------------------------
// Client partitioning

std::vector<std::vector<Index>> assign_users(Index n_users, std::size_t k,
                                             std::uint64_t seed) {
  if (k < 1) throw ConfigError("number of clients must be >= 1");
  if (k > n_users)
    throw ConfigError("cannot partition " + std::to_string(n_users) +
                      " users into " + std::to_string(k) + " clients");
  std::vector<Index> order(n_users);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "partition"));
  shuffle(order, rng);
  std::vector<std::vector<Index>> out(k);
  for (std::size_t p = 0; p < order.size(); ++p) out[p % k].push_back(order[p]);
  for (auto& users : out) std::sort(users.begin(), users.end());
  return out;
}

std::vector<ClientShard> shards_for(const Dataset& ds,
                                    const std::vector<std::vector<Index>>& users) {
  std::vector<Index> owner(ds.n_users, UINT32_MAX);
  for (std::size_t c = 0; c < users.size(); ++c)
    for (auto u : users[c]) owner[u] = static_cast<Index>(c);

  std::vector<std::vector<Interaction>> rows(users.size());
  for (const auto& x : ds.interactions) {
    const auto c = owner[x.user];
    if (c == UINT32_MAX) throw ContractError("user without a client assignment");
    rows[c].push_back(x);
  }
  std::vector<ClientShard> shards;
  shards.reserve(users.size());
  for (std::size_t c = 0; c < users.size(); ++c) {
    ClientShard s;
    s.client_id = static_cast<Index>(c);
    s.users = users[c];
    s.sample_count = rows[c].size();
    s.public_mask.assign(rows[c].size(), true);
    s.data = ds.with_interactions(std::move(rows[c]));
    shards.push_back(std::move(s));
  }
  return shards;
}

std::vector<ClientShard> partition_clients(const Dataset& ds, std::size_t k,
                                           std::uint64_t seed) {
  return shards_for(ds, assign_users(ds.n_users, k, seed));
}

Dataset ClientShard::public_part() const {
  std::vector<Interaction> rows;
  for (std::size_t r = 0; r < data.interactions.size(); ++r)
    if (public_mask[r]) rows.push_back(data.interactions[r]);
  return data.with_interactions(std::move(rows));
}

std::size_t public_count(double p, std::size_t n) {
  if (p <= 0.0) return 0;
  if (p >= 1.0) return n;
  const double c = p * static_cast<double>(n);
  // p*n that is an integer up to rounding noise (0.3*10) must not round up.
  const double r = std::round(c);
  if (std::abs(c - r) < 1e-9) return static_cast<std::size_t>(r);
  return static_cast<std::size_t>(std::ceil(c));
}

ClientShard apply_public_ratio(const ClientShard& shard, double p,
                               std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0))
    throw ConfigError("public ratio must lie in [0, 1]");
  ClientShard out = shard;
  out.public_mask.assign(shard.data.interactions.size(), false);
  Rng rng(derive_seed(seed, {fnv1a64("public"), shard.client_id}));
  const auto& rows = shard.data.interactions;
  std::size_t begin = 0;
  while (begin < rows.size()) {
    std::size_t end = begin;
    while (end < rows.size() && rows[end].user == rows[begin].user) ++end;
    const auto n = end - begin;
    const auto m = public_count(p, n);
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), begin);
    for (std::size_t i = 0; i < m; ++i) {
      const auto j = i + uniform_index(rng, n - i);
      std::swap(pos[i], pos[j]);
      out.public_mask[pos[i]] = true;
    }
    begin = end;
  }
  return out;
}

}  // namespace fedgrec
