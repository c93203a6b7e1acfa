#pragma once

// NNW1 tensor container.
//
//   "NNW1"
//   repeated until end of file:
//     u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
//     product(dims) x f32 values
//
// All integers and floats little-endian. Network weights are stored in
// architecture order; probability maps use the same container.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "nuclearea/error.hpp"
#include "nuclearea/network.hpp"
#include "nuclearea/tensor.hpp"

namespace nuclearea {

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  bool at_end() const { return pos_ == bytes_.size(); }

  std::uint32_t read_uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < width; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }

  std::string read_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw DataError(std::string("truncated payload: file ends inside ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::string encode_tensor_container(const std::vector<NamedTensor>& tensors) {
  std::string out = "NNW1";
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw DataError("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.ndim() > 0xff) throw DataError("tensor " + name + " has too many dimensions");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.ndim()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline std::vector<NamedTensor> decode_tensor_container(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "NNW1") != 0) throw DataError("corrupt header: missing NNW1 magic");
  detail::ByteReader reader(bytes);
  reader.read_string(4, "magic");
  std::vector<NamedTensor> tensors;
  while (!reader.at_end()) {
    const auto name_len = reader.read_uint(2, "tensor name length");
    if (name_len == 0) throw DataError("corrupt header: empty tensor name");
    std::string name = reader.read_string(name_len, "tensor name");
    const auto ndim = reader.read_uint(1, "tensor rank");
    if (ndim == 0 || ndim > 8)
      throw DataError("corrupt header: tensor " + name + " has rank " + std::to_string(ndim));
    Shape shape;
    for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(reader.read_uint(4, "tensor dims"));
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = std::bit_cast<float>(reader.read_uint(4, ("values of " + name).c_str()));
    tensors.push_back({std::move(name), std::move(t)});
  }
  return tensors;
}

inline void write_tensor_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_tensor_container(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

inline std::vector<NamedTensor> read_tensor_container(const std::string& path) {
  return decode_tensor_container(detail::read_file(path));
}

// -- network weights --------------------------------------------------------

template <typename T>
void save_weights(const NetworkParams<T>& params, const std::string& path) {
  std::vector<NamedTensor> tensors;
  for (std::size_t i = 0; i < params.count(); ++i)
    tensors.push_back({params.names[i], params.tensors[i].template cast<float>()});
  write_tensor_container(path, tensors);
}

/// Recovers the architecture from the stored shapes (conv1, conv3, fc1, fc2).
/// Accepts both patch-form and fully convolutional fc weights.
inline ArchitectureConfig infer_architecture(const std::vector<NamedTensor>& tensors) {
  auto find = [&](const std::string& name) -> const Tensor<float>& {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw DataError("shape mismatch: weights file has no tensor " + name);
  };
  const auto& c1 = find("conv1.weight");
  const auto& c3 = find("conv3.weight");
  const auto& f1 = find("fc1.weight");
  const auto& f2 = find("fc2.weight");
  if (c1.ndim() != 4 || c3.ndim() != 4 || (f1.ndim() != 2 && f1.ndim() != 4) || (f2.ndim() != 2 && f2.ndim() != 4))
    throw DataError("shape mismatch: unexpected tensor ranks in weights file");
  ArchitectureConfig cfg;
  cfg.channels = c1.dim(1);
  cfg.narrow_width = c1.dim(0);
  cfg.wide_width = c3.dim(0);
  cfg.fc_width = f1.dim(0);
  cfg.num_classes = f2.dim(0);
  const std::size_t fc_in = f1.ndim() == 2 ? f1.dim(1) : f1.dim(1) * f1.dim(2) * f1.dim(3);
  if (cfg.wide_width == 0 || fc_in % cfg.wide_width != 0)
    throw DataError("shape mismatch: fc1 input width incompatible with conv widths");
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(fc_in / cfg.wide_width))));
  if (side * side * cfg.wide_width != fc_in) throw DataError("shape mismatch: fc1 input is not a square feature map");
  cfg.patch_px = side * ArchitectureConfig::downsampling;
  return cfg;
}

/// Loads weights and checks every tensor against `d`.
template <typename T>
NetworkParams<T> load_weights(const std::string& path, const NetworkDescription& d) {
  const auto tensors = read_tensor_container(path);
  if (tensors.size() != d.params.size())
    throw DataError("shape mismatch: file holds " + std::to_string(tensors.size()) + " tensors, architecture has " +
                    std::to_string(d.params.size()));
  NetworkParams<T> p;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& spec = d.params[i];
    if (tensors[i].name != spec.name)
      throw DataError("shape mismatch: tensor " + std::to_string(i) + " is " + tensors[i].name + ", expected " +
                      spec.name);
    if (tensors[i].tensor.size() != shape_size(spec.shape) ||
        (tensors[i].tensor.shape() != spec.shape && spec.name != "fc1.weight" && spec.name != "fc2.weight"))
      throw DataError("shape mismatch: " + spec.name + " is " + shape_string(tensors[i].tensor.shape()) +
                      ", architecture expects " + shape_string(spec.shape));
    Tensor<T> t = tensors[i].tensor.template cast<T>();
    t.reshape(spec.shape);
    p.names.push_back(spec.name);
    p.tensors.push_back(std::move(t));
    p.velocity.emplace_back(spec.shape);
  }
  return p;
}

/// A weights file together with the architecture it implies.
template <typename T>
struct LoadedModel {
  NetworkDescription description;
  NetworkParams<T> params;
};

template <typename T>
LoadedModel<T> load_model(const std::string& path) {
  const auto tensors = read_tensor_container(path);
  auto d = build_paper_architecture(infer_architecture(tensors));
  auto p = load_weights<T>(path, d);
  return {std::move(d), std::move(p)};
}

template <typename T>
void save_dense_network(const DenseNetwork<T>& dense, const std::string& path) {
  save_weights(dense.params, path);
}

}  // namespace nuclearea
