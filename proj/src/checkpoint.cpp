#include "fedgrec/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "fedgrec/errors.hpp"

namespace fedgrec {

using nlohmann::json;

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::kF32;
  if (s == "f64") return Dtype::kF64;
  throw ConfigError("unknown dtype '" + s + "' (expected f32 or f64)");
}

std::string to_string(Dtype d) { return d == Dtype::kF32 ? "f32" : "f64"; }

ModelParams round_to_dtype(const ModelParams& params, Dtype dtype) {
  ModelParams out = params;
  if (dtype == Dtype::kF32)
    for (auto& t : out.tensors)
      for (auto& v : t.data) v = static_cast<double>(static_cast<float>(v));
  return out;
}

namespace {

json config_json(const ModelConfig& c) {
  return {{"n_users", c.n_users},
          {"n_items", c.n_items},
          {"user_field_cardinalities", c.user_field_cardinalities},
          {"item_field_cardinalities", c.item_field_cardinalities},
          {"dim", c.dim},
          {"heads", c.heads},
          {"layers", c.layers},
          {"hops", c.hops},
          {"mlp_hidden", c.mlp_hidden},
          {"history_length", c.history_length},
          {"leaky_slope", c.leaky_slope}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.n_users = j.at("n_users").get<Index>();
  c.n_items = j.at("n_items").get<Index>();
  c.user_field_cardinalities = j.at("user_field_cardinalities").get<std::vector<Index>>();
  c.item_field_cardinalities = j.at("item_field_cardinalities").get<std::vector<Index>>();
  c.dim = j.at("dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.hops = j.at("hops").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::vector<std::size_t>>();
  c.history_length = j.at("history_length").get<std::size_t>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  return c;
}

template <typename U>
void put_le(std::string& out, U bits) {
  for (std::size_t b = 0; b < sizeof(U); ++b)
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(p[b]) << (8 * b);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params,
                     Dtype dtype) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  for (const auto& t : params.tensors) {
    const auto file = t.name + ".bin";
    std::string bytes;
    bytes.reserve(t.data.size() * (dtype == Dtype::kF32 ? 4 : 8));
    for (auto v : t.data) {
      if (dtype == Dtype::kF32)
        put_le(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        put_le(bytes, std::bit_cast<std::uint64_t>(v));
    }
    std::ofstream out(dir / file, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"file", file}});
  }
  const json manifest{{"format", "fedgrec-checkpoint"},
                      {"version", 1},
                      {"dtype", to_string(dtype)},
                      {"endianness", "little"},
                      {"config", config_json(params.config)},
                      {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IncompatibleCheckpointError("unreadable manifest in " + dir.string() + ": " + e.what());
  }
  ModelParams params;
  std::string dtype_name;
  try {
    if (manifest.at("format") != "fedgrec-checkpoint")
      throw IncompatibleCheckpointError(dir.string() + " is not a fedgrec checkpoint");
    params = ModelParams::zeros(config_from(manifest.at("config")));
    dtype_name = manifest.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw IncompatibleCheckpointError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  const auto dtype = parse_dtype(dtype_name);
  const auto& list = manifest.at("tensors");
  if (list.size() != params.tensors.size())
    throw IncompatibleCheckpointError("manifest lists " + std::to_string(list.size()) +
                                      " tensors, config implies " +
                                      std::to_string(params.tensors.size()));
  for (std::size_t i = 0; i < list.size(); ++i) {
    auto& t = params.tensors[i];
    const auto& entry = list[i];
    if (entry.at("name") != t.name || entry.at("rows") != t.rows || entry.at("cols") != t.cols)
      throw IncompatibleCheckpointError("tensor " + std::to_string(i) + " in manifest (" +
                                        entry.at("name").get<std::string>() +
                                        ") does not match " + t.name);
    const auto bytes = read_file(dir / entry.at("file").get<std::string>());
    const std::size_t width = dtype == Dtype::kF32 ? 4 : 8;
    if (bytes.size() != t.data.size() * width)
      throw IncompatibleCheckpointError(t.name + ".bin has " + std::to_string(bytes.size()) +
                                        " bytes, expected " +
                                        std::to_string(t.data.size() * width));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t k = 0; k < t.data.size(); ++k, p += width)
      t.data[k] = dtype == Dtype::kF32
                      ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                      : std::bit_cast<double>(get_le<std::uint64_t>(p));
  }
  return params;
}

ModelParams load_checkpoint(const std::filesystem::path& dir, const ModelConfig& expected) {
  auto params = load_checkpoint(dir);
  const auto reference = ModelParams::zeros(expected);
  if (!params.same_shape(reference)) {
    std::string detail;
    for (std::size_t i = 0; i < std::min(params.tensors.size(), reference.tensors.size()); ++i) {
      const auto& a = params.tensors[i];
      const auto& b = reference.tensors[i];
      if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) {
        detail = a.name + " is " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                 ", config expects " + b.name + " " + std::to_string(b.rows) + "x" +
                 std::to_string(b.cols);
        break;
      }
    }
    if (detail.empty()) detail = "tensor count differs";
    throw IncompatibleCheckpointError("checkpoint " + dir.string() +
                                      " is incompatible with the configured model: " + detail);
  }
  params.config = expected;
  params.layout = ParamLayout(expected);
  return params;
}

}  // namespace fedgrec
