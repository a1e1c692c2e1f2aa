#pragma once

// Named parameter storage and the binary weight checkpoint.
//
// Checkpoint layout, all integers and floats little-endian:
//   magic    8 bytes  "PCNCKPT\0"
//   version  u32      (currently 1)
//   count    u32      number of records
//   record:  u32 name length, name bytes (UTF-8, no terminator),
//            u32 rank, rank x u64 dims, numel x f64 row-major payload

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pcn/tensor.hpp"

namespace pcn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kCheckpointMagic{'P', 'C', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(char((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(char((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  put_u64(os, bits);
}
inline std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated");
    v |= std::uint64_t(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_uint(is, 8);
  double d;
  std::memcpy(&d, &bits, sizeof d);
  return d;
}

}  // namespace detail

/// Writes records to `path` via a temporary file and rename, so readers
/// never observe a partial checkpoint.
inline void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, std::uint32_t(records.size()));
    for (const auto& r : records) {
      if (numel(r.shape) != r.values.size()) throw CheckpointError("record " + r.name + " has inconsistent shape");
      detail::put_u32(os, std::uint32_t(r.name.size()));
      os.write(r.name.data(), std::streamsize(r.name.size()));
      detail::put_u32(os, std::uint32_t(r.shape.size()));
      for (auto d : r.shape) detail::put_u64(os, d);
      for (double v : r.values) detail::put_f64(os, v);
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw CheckpointError(path.string() + " is not a checkpoint file");
  const auto version = detail::get_uint(is, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::get_uint(is, 4);
  std::vector<CheckpointRecord> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name.resize(detail::get_uint(is, 4));
    is.read(r.name.data(), std::streamsize(r.name.size()));
    const auto rank = detail::get_uint(is, 4);
    for (std::uint64_t d = 0; d < rank; ++d) r.shape.push_back(detail::get_uint(is, 8));
    r.values.resize(numel(r.shape));
    for (auto& v : r.values) v = detail::get_f64(is);
    records.push_back(std::move(r));
  }
  return records;
}

/// Which training stage owns a parameter. Stages freeze by group.
enum class ParamGroup : int { Stage1 = 1, Stage2 = 2, Stage3 = 3 };

struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor value;
  RealVector velocity;
};

/// Ordered collection of named trainable tensors.
class ParamStore {
 public:
  /// The returned reference is invalidated by the next add().
  Tensor& add(const std::string& name, ParamGroup group, Shape shape, RealVector init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = params_.size();
    params_.push_back({name, group, Tensor::parameter(std::move(shape), std::move(init)), {}});
    return params_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].value;
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
  }

  ParamGroup group(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second].group;
  }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::vector<CheckpointRecord> to_records() const {
    std::vector<CheckpointRecord> out;
    for (const auto& p : params_) {
      out.push_back({p.name, p.value.shape(), std::vector<double>(p.value.data().begin(), p.value.data().end())});
    }
    return out;
  }

  /// Copies matching records into existing parameters. Every parameter must
  /// be present in `records` with the same shape.
  void load_records(const std::vector<CheckpointRecord>& records) {
    std::map<std::string, const CheckpointRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    for (auto& p : params_) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
      if (it->second->shape != p.value.shape()) {
        throw CheckpointError("parameter " + p.name + " has shape " + to_string(it->second->shape) +
                              " in checkpoint, expected " + to_string(p.value.shape()));
      }
      auto dst = p.value.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = Real(it->second->values[i]);
      p.velocity.clear();
    }
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace pcn
