#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fedgrec {

using Index = std::uint32_t;
using Timestamp = std::int64_t;

struct Interaction {
  Index user = 0;
  Index item = 0;
  double rating = 1.0;
  Timestamp timestamp = 0;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Lexicographic (user, timestamp, item, rating) order used for normalization.
bool interaction_less(const Interaction& a, const Interaction& b);

// One categorical side-information field; values[e] is entity e's category.
struct FeatureField {
  std::string name;
  Index cardinality = 0;
  std::vector<Index> values;

  friend bool operator==(const FeatureField&, const FeatureField&) = default;
};

// Dense index -> raw id string, in first-appearance order.
struct IdMap {
  std::vector<std::string> raw;

  void write(const std::filesystem::path& path) const;
  static IdMap read(const std::filesystem::path& path);
  friend bool operator==(const IdMap&, const IdMap&) = default;
};

struct Dataset {
  std::vector<Interaction> interactions;  // sorted by (user, timestamp)
  Index n_users = 0;
  Index n_items = 0;
  std::vector<FeatureField> user_features;
  std::vector<FeatureField> item_features;
  IdMap user_ids;
  IdMap item_ids;

  bool empty() const { return interactions.empty(); }
  std::size_t size() const { return interactions.size(); }

  // Same vocabulary and features, different interactions.
  Dataset with_interactions(std::vector<Interaction> rows) const;

  // Throws ContractError when an invariant does not hold.
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Stable sort by (user, timestamp); ties keep file order.
void normalize(std::vector<Interaction>& rows);

// Per-user interaction counts.
std::vector<std::size_t> user_counts(const Dataset& ds);

// Reads `user<TAB>item<TAB>rating<TAB>timestamp` lines. Raw ids are
// remapped to dense indices in order of first appearance.
Dataset load_interactions(const std::filesystem::path& path);

// Writes dense indices in the same four-column format.
void write_interactions(const Dataset& ds, const std::filesystem::path& path);

// Removes users with fewer than `min_count` interactions (and items below
// `min_item_count`) repeatedly until nothing changes, then re-densifies.
Dataset filter_min_interactions(const Dataset& ds, std::size_t min_count = 5,
                                std::size_t min_item_count = 1);

enum class SplitMode {
  kPerUser801010,  // 80/10/10 per user
  kHoldout8020,    // 20% test per user, validation = 10% of the remainder
};

struct SplitBundle {
  Dataset train;
  Dataset validation;
  Dataset test;
  Dataset tuning_subset;  // 10% sample of train
};

struct SplitSizes {
  std::size_t train = 0, validation = 0, test = 0;
};

// Floor each share, then hand the remainder to validation before test.
SplitSizes split_sizes(std::size_t n, SplitMode mode = SplitMode::kPerUser801010);

SplitBundle split(const Dataset& ds, std::uint64_t seed,
                  SplitMode mode = SplitMode::kPerUser801010);

struct ClientShard {
  Index client_id = 0;
  Dataset data;                    // global user/item indexing
  std::vector<bool> public_mask;   // parallel to data.interactions
  std::vector<Index> users;        // sorted
  std::size_t sample_count = 0;

  // Public interactions only, as a Dataset over the same vocabulary.
  Dataset public_part() const;
};

// Seeded user shuffle, dealt round-robin into k shards.
std::vector<ClientShard> partition_clients(const Dataset& ds, std::size_t k,
                                           std::uint64_t seed);

// User-to-client assignment computed by partition_clients.
std::vector<std::vector<Index>> assign_users(Index n_users, std::size_t k,
                                             std::uint64_t seed);

// Builds shards for an existing assignment (used to carve out val/test views).
std::vector<ClientShard> shards_for(const Dataset& ds,
                                    const std::vector<std::vector<Index>>& users);

// ceil(p * n) public interactions per user, chosen uniformly.
ClientShard apply_public_ratio(const ClientShard& shard, double p,
                               std::uint64_t seed);

std::size_t public_count(double p, std::size_t n);

}  // namespace fedgrec
