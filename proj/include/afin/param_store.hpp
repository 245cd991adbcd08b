#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "afin/rng.hpp"
#include "afin/tensor.hpp"

namespace afin {

// Flat registry of named learned tensors with gradient slots. Registration
// order is the registry order; two networks built from the same configuration
// produce identical registries regardless of the tasks they later process.
class ParameterStore {
 public:
  int add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
    int id = int(names_.size());
    index_[name] = id;
    names_.push_back(name);
    grads_.emplace_back(init.rows(), init.cols());
    values_.push_back(std::move(init));
    return id;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: unknown name " + name);
    return it->second;
  }

  int count() const { return int(names_.size()); }
  const std::string& name(int id) const { return names_[size_t(id)]; }
  Tensor& value(int id) { return values_[size_t(id)]; }
  const Tensor& value(int id) const { return values_[size_t(id)]; }
  Tensor& grad(int id) { return grads_[size_t(id)]; }
  const Tensor& grad(int id) const { return grads_[size_t(id)]; }

  size_t total_parameters() const {
    size_t n = 0;
    for (const Tensor& t : values_) n += t.size();
    return n;
  }

  void zero_grads() {
    for (Tensor& g : grads_) g.fill(0.0);
  }

  double grad_max_abs() const {
    double m = 0.0;
    for (const Tensor& g : grads_) m = std::max(m, g.max_abs());
    return m;
  }

  // (name, rows, cols) triples in registry order; the dimension-independence
  // checks compare these across constructions.
  std::vector<std::tuple<std::string, int, int>> signature() const {
    std::vector<std::tuple<std::string, int, int>> sig;
    sig.reserve(names_.size());
    for (size_t i = 0; i < names_.size(); ++i)
      sig.emplace_back(names_[i], values_[i].rows(), values_[i].cols());
    return sig;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Binary tensor container.
//
// Layout (all integers little-endian):
//   magic "AFIN" | u32 version | u32 tensor_count
//   per tensor: u32 name_len | name bytes | u8 dtype (0=f32, 1=f64) |
//               u8 rank | u32 dims[rank] | payload (little-endian)
// Tensors are written as f64 and round-trip bit-exactly; f32 payloads are
// accepted on read and widened.
// ---------------------------------------------------------------------------

namespace container {

constexpr uint32_t kFormatVersion = 1;

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated payload");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline float get_f32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated payload");
  uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= uint32_t(b[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace container

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_tensor_container(const std::string& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write("AFIN", 4);
  container::put_u32(os, container::kFormatVersion);
  container::put_u32(os, uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    container::put_u32(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(1));                    // dtype f64
    os.put(char(2));                    // rank
    container::put_u32(os, uint32_t(t.rows()));
    container::put_u32(os, uint32_t(t.cols()));
    for (size_t i = 0; i < t.size(); ++i) container::put_f64(os, t[i]);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline NamedTensors load_tensor_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AFIN", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic: " + path);
  uint32_t version = container::get_u32(is);
  if (version != container::kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version");
  uint32_t count = container::get_u32(is);
  NamedTensors out;
  out.reserve(count);
  for (uint32_t k = 0; k < count; ++k) {
    uint32_t name_len = container::get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    int dtype = is.get();
    int rank = is.get();
    if (!is || (dtype != 0 && dtype != 1)) throw std::runtime_error("checkpoint: bad dtype");
    if (rank < 1 || rank > 2) throw std::runtime_error("checkpoint: unsupported rank");
    int rows = int(container::get_u32(is));
    int cols = rank == 2 ? int(container::get_u32(is)) : 1;
    Tensor t(rows, cols);
    for (size_t i = 0; i < t.size(); ++i)
      t[i] = dtype == 1 ? container::get_f64(is) : double(container::get_f32(is));
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline Tensor scaled_uniform_init(int rows, int cols, int fan_in, RngStream& rng) {
  double bound = 1.0 / std::sqrt(double(fan_in));
  Tensor t(rows, cols);
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace afin
