#include "stydesty/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

namespace stydesty {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 0x100000001b3ULL;
  }
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

}  // namespace

std::uint64_t parameter_hash(std::span<const Parameter* const> params) {
  std::uint64_t h = kFnvBasis;
  for (const auto* p : params) {
    fnv(h, p->name.data(), p->name.size());
    for (int d : p->value.shape()) fnv(h, &d, sizeof d);
    auto data = p->value.data();
    fnv(h, data.data(), data.size_bytes());
  }
  return h;
}

std::uint64_t parameter_hash(std::span<Parameter* const> params) {
  std::vector<const Parameter*> c(params.begin(), params.end());
  return parameter_hash(std::span<const Parameter* const>(c));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void save_checkpoint(const std::filesystem::path& stem, std::span<const Parameter* const> params,
                     const nlohmann::json& meta) {
  std::vector<const Parameter*> sorted(params.begin(), params.end());
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->name < b->name; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->name == sorted[i - 1]->name) throw CheckpointError("duplicate parameter name '" + sorted[i]->name + "'");
  }

  std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw CheckpointError("cannot write " + with_ext(stem, ".bin").string());
  nlohmann::json entries = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto* p : sorted) {
    auto data = p->value.data();
    bin.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    entries[p->name] = {{"shape", p->value.shape()}, {"offset", offset}, {"dtype", "float32-le"}};
    offset += data.size_bytes();
  }
  if (!bin) throw CheckpointError("short write to " + with_ext(stem, ".bin").string());

  nlohmann::json manifest = meta;
  manifest["tensors"] = entries;
  manifest["bytes"] = offset;
  std::ofstream js(with_ext(stem, ".json"));
  if (!js) throw CheckpointError("cannot write " + with_ext(stem, ".json").string());
  js << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& stem) {
  const auto json_path = with_ext(stem, ".json"), bin_path = with_ext(stem, ".bin");
  std::ifstream js(json_path);
  if (!js) throw CheckpointError("missing checkpoint manifest " + json_path.string());
  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(json_path.string() + ": " + e.what());
  }
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw CheckpointError("missing checkpoint data " + bin_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  try {
    for (const auto& [name, e] : ck.manifest.at("tensors").items()) {
      if (e.at("dtype").get<std::string>() != "float32-le") throw CheckpointError(name + ": unsupported dtype");
      Shape shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto n = static_cast<std::uint64_t>(shape_numel(shape));
      if (offset + n * sizeof(float) > bytes.size()) {
        throw CheckpointError(bin_path.string() + ": tensor '" + name + "' at byte offset " + std::to_string(offset) +
                              " runs past end of file (" + std::to_string(bytes.size()) + " bytes)");
      }
      std::vector<float> v(n);
      std::memcpy(v.data(), bytes.data() + offset, n * sizeof(float));
      ck.tensors.emplace(name, Tensor(std::move(shape), std::move(v)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(json_path.string() + ": " + e.what());
  }
  return ck;
}

void Checkpoint::restore(std::span<Parameter* const> params) const {
  for (auto* p : params) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks parameter '" + p->name + "'");
    if (it->second.shape() != p->value.shape()) {
      throw CheckpointError("checkpoint parameter '" + p->name + "' has shape " + shape_str(it->second.shape()) +
                            ", model expects " + shape_str(p->value.shape()));
    }
    p->value = it->second.clone();
  }
}

}  // namespace stydesty
