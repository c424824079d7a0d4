#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "fedgrec/dataset.hpp"
#include "fedgrec/graphs.hpp"
#include "fedgrec/model.hpp"

namespace testing {

using namespace fedgrec;

inline Dataset make_dataset(std::vector<Interaction> rows, Index n_users, Index n_items) {
  Dataset ds;
  normalize(rows);
  ds.interactions = std::move(rows);
  ds.n_users = n_users;
  ds.n_items = n_items;
  for (Index u = 0; u < n_users; ++u) ds.user_ids.raw.push_back("u" + std::to_string(u));
  for (Index i = 0; i < n_items; ++i) ds.item_ids.raw.push_back("i" + std::to_string(i));
  return ds;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fedgrec-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path write(const std::string& name, const std::string& text) const {
    const auto p = path_ / name;
    std::ofstream(p) << text;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Graph state over a handful of interactions; pointers stay valid because
// the world lives behind a unique_ptr.
struct World {
  Dataset ds;
  TimeSlicedGraph graph;
  ImplicitEdges users, items;
  GraphContext ctx;
};

inline std::unique_ptr<World> make_world(std::vector<Interaction> rows, Index n_users,
                                         Index n_items, std::size_t fanout = 10) {
  auto w = std::make_unique<World>();
  w->ds = make_dataset(std::move(rows), n_users, n_items);
  w->graph = build_time_slices(w->ds, default_slice_length(w->ds, 2));
  w->users = implicit_user_relations(w->ds, 1, 20);
  w->items = implicit_item_relations(w->ds, 20, 1.0);
  w->ctx.graph = &w->graph;
  w->ctx.user_edges = &w->users;
  w->ctx.item_edges = &w->items;
  w->ctx.fanout = fanout;
  w->ctx.drop_rate = 0.0;
  return w;
}

}  // namespace testing
