#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "medeir/common.hpp"
#include "medeir/tensor.hpp"

namespace medeir {

inline constexpr int kCheckpointVersion = 1;

// A named raw array as stored on disk.
struct StoredArray {
  std::string dtype;  // "f32", "f64" or "i32"
  Shape shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  std::vector<T> as() const {
    std::vector<T> out(shape_numel(shape));
    if (dtype == "f32") {
      copy_from<float>(out);
    } else if (dtype == "f64") {
      copy_from<double>(out);
    } else if (dtype == "i32") {
      copy_from<std::int32_t>(out);
    } else {
      throw IoError("unknown dtype " + dtype);
    }
    return out;
  }

 private:
  template <typename S, typename T>
  void copy_from(std::vector<T>& out) const {
    if (bytes.size() != out.size() * sizeof(S)) throw IoError("array byte size mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
      S v;
      std::memcpy(&v, bytes.data() + i * sizeof(S), sizeof(S));
      out[i] = static_cast<T>(v);
    }
  }
};

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  if constexpr (std::is_same_v<T, double>) return "f64";
  if constexpr (std::is_same_v<T, std::int32_t>) return "i32";
}

// Ordered collection of arrays written as manifest.json + weights.bin in a
// directory. Offsets index into the single little-endian blob.
class CheckpointWriter {
 public:
  static_assert(std::endian::native == std::endian::little, "little-endian host required");

  template <typename T>
  void add(const std::string& name, const Shape& shape, std::span<const T> values) {
    json entry{{"name", name}, {"shape", shape}, {"dtype", dtype_name<T>()},
               {"offset", blob_.size()}, {"nbytes", values.size() * sizeof(T)}};
    entries_.push_back(std::move(entry));
    const auto* p = reinterpret_cast<const unsigned char*>(values.data());
    blob_.insert(blob_.end(), p, p + values.size() * sizeof(T));
  }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    add<T>(name, t.shape(), t.data());
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json manifest{{"version", kCheckpointVersion}, {"blob", "weights.bin"}, {"tensors", entries_}};
    write_file_atomic(dir / "weights.bin",
                      std::string_view(reinterpret_cast<const char*>(blob_.data()), blob_.size()));
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  }

 private:
  std::vector<json> entries_;
  std::vector<unsigned char> blob_;
};

inline std::map<std::string, StoredArray> read_checkpoint_arrays(const std::filesystem::path& dir) {
  const json manifest = json::parse(read_file(dir / "manifest.json"));
  if (!manifest.contains("version")) throw IoError("checkpoint manifest lacks version");
  if (manifest["version"].get<int>() != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + manifest["version"].dump());
  }
  const std::string blob = read_file(dir / manifest.value("blob", std::string("weights.bin")));
  std::map<std::string, StoredArray> out;
  for (const auto& e : manifest.at("tensors")) {
    StoredArray a;
    a.dtype = e.at("dtype").get<std::string>();
    a.shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::size_t>();
    const auto n = e.at("nbytes").get<std::size_t>();
    if (off + n > blob.size()) throw IoError("checkpoint blob truncated");
    a.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(off),
                   blob.begin() + static_cast<std::ptrdiff_t>(off + n));
    out.emplace(e.at("name").get<std::string>(), std::move(a));
  }
  return out;
}

}  // namespace medeir
