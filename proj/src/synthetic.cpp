#include "fedgrec/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "fedgrec/errors.hpp"
#include "fedgrec/random.hpp"

namespace fedgrec {

Index block_of_user(const SyntheticConfig& cfg, Index user) {
  return user % cfg.blocks;
}

Index block_of_item(const SyntheticConfig& cfg, Index item) {
  const Index width = cfg.n_items / cfg.blocks;
  return std::min<Index>(item / width, cfg.blocks - 1);
}

Dataset make_block_dataset(const SyntheticConfig& cfg) {
  if (cfg.blocks < 1 || cfg.n_items < cfg.blocks || cfg.n_users < 1)
    throw ConfigError("synthetic dataset needs n_users >= 1 and n_items >= blocks");
  const Index width = cfg.n_items / cfg.blocks;
  if (cfg.core_items + cfg.tail_per_user > width)
    throw ConfigError("core_items + tail_per_user exceeds the block width");

  Rng rng(derive_seed(cfg.seed, "synthetic"));
  Dataset ds;
  ds.n_users = cfg.n_users;
  ds.n_items = cfg.n_items;
  for (Index u = 0; u < cfg.n_users; ++u) ds.user_ids.raw.push_back("u" + std::to_string(u));
  for (Index i = 0; i < cfg.n_items; ++i) ds.item_ids.raw.push_back("i" + std::to_string(i));

  auto stamp = [&] {
    return static_cast<Timestamp>(uniform_index(rng, static_cast<std::uint64_t>(cfg.horizon)));
  };
  for (Index u = 0; u < cfg.n_users; ++u) {
    const Index b = block_of_user(cfg, u);
    const Index first = b * width;
    const Index last = (b + 1 == cfg.blocks) ? cfg.n_items : first + width;
    for (Index j = 0; j < cfg.core_items; ++j)
      if (uniform01(rng) < cfg.core_prob)
        ds.interactions.push_back({u, first + j, 1.0, stamp()});

    std::vector<Index> tail(last - first - cfg.core_items);
    std::iota(tail.begin(), tail.end(), first + cfg.core_items);
    shuffle(tail, rng);
    for (Index j = 0; j < cfg.tail_per_user && j < tail.size(); ++j)
      ds.interactions.push_back({u, tail[j], 1.0, stamp()});

    if (cfg.blocks > 1) {
      std::vector<Index> other;
      for (Index i = 0; i < cfg.n_items; ++i)
        if (i < first || i >= last) other.push_back(i);
      shuffle(other, rng);
      for (Index j = 0; j < cfg.noise_per_user && j < other.size(); ++j)
        ds.interactions.push_back({u, other[j], 1.0, stamp()});
    }
  }
  normalize(ds.interactions);
  return ds;
}

}  // namespace fedgrec
