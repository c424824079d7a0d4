#pragma once

#include <cstdint>

#include "fedgrec/dataset.hpp"

namespace fedgrec {

// Block-structured implicit-feedback generator. Users and items are split
// into `blocks` preference groups (user u belongs to block u % blocks). Each
// user hits every core item of its block with probability `core_prob`, plus
// `tail_per_user` distinct non-core items of its block and `noise_per_user`
// items from other blocks. Timestamps are uniform in [0, horizon).
struct SyntheticConfig {
  Index n_users = 50;
  Index n_items = 100;
  Index blocks = 2;
  Index core_items = 12;
  double core_prob = 0.8;
  Index tail_per_user = 2;
  Index noise_per_user = 1;
  Timestamp horizon = 1'000'000;
  std::uint64_t seed = 7;
};

Dataset make_block_dataset(const SyntheticConfig& cfg);

Index block_of_user(const SyntheticConfig& cfg, Index user);
Index block_of_item(const SyntheticConfig& cfg, Index item);

}  // namespace fedgrec
