// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Tensor bundles and the DRMB checkpoint container.
//
// Layout (little-endian):
//   "DRMB" | u32 version (=1) | u64 header length H | H bytes JSON | data
//
// The JSON header is
//   {"metadata": {str: str},
//    "tensors": [{"dtype": "f32"|"f64", "name": str, "nbytes": int,
//                 "offset": int, "shape": [int...]}, ...]}
// with offsets relative to the first data byte, 8-byte aligned, and gaps
// zero-filled. Tensors are listed in insertion order; object keys are
// serialised sorted and without whitespace, so writing is deterministic.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "drm/error.hpp"
#include "drm/linalg.hpp"

namespace drm {

enum class DType { f32, f64 };

constexpr std::size_t element_size(DType d) noexcept { return d == DType::f32 ? 4 : 8; }
constexpr std::string_view to_string(DType d) noexcept { return d == DType::f32 ? "f32" : "f64"; }

inline std::optional<DType> parse_dtype(std::string_view s) noexcept {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  return std::nullopt;
}

/// Dense rank-1 or rank-2 tensor. Values are held as doubles; an f32 tensor
/// holds only values exactly representable as float, so what is in memory
/// is exactly what is on disk.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, DType dtype, std::vector<double> values)
      : shape_(std::move(shape)), dtype_(dtype), values_(std::move(values)) {
    if (shape_.empty() || shape_.size() > 2)
      throw Error(ErrorKind::InvalidTensor,
                  fmt::format("rank {} is not supported (expected 1 or 2)", shape_.size()));
    for (auto e : shape_)
      if (e == 0) throw Error(ErrorKind::InvalidTensor, "zero extent in shape");
    if (values_.size() != numel())
      throw Error(ErrorKind::InvalidTensor,
                  fmt::format("{} values for shape with {} elements", values_.size(), numel()));
    for (auto& v : values_) {
      if (dtype_ == DType::f32) v = static_cast<double>(static_cast<float>(v));
      if (!std::isfinite(v)) throw Error(ErrorKind::NonFiniteValue, "tensor has a NaN or infinity");
    }
  }

  static Tensor from_matrix(const Matrix& m, DType dtype) {
    std::vector<double> vals(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) vals[k++] = m(i, j);
    return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, dtype,
                  std::move(vals));
  }

  static Tensor from_vector(const Vector& v, DType dtype) {
    return Tensor({static_cast<std::size_t>(v.size())}, dtype,
                  std::vector<double>(v.data(), v.data() + v.size()));
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  DType dtype() const noexcept { return dtype_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t numel() const noexcept {
    return std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t nbytes() const noexcept { return numel() * element_size(dtype_); }

  Matrix to_matrix() const {
    if (rank() != 2) throw Error(ErrorKind::ShapeMismatch, "tensor is not rank 2");
    Matrix m(static_cast<Index>(shape_[0]), static_cast<Index>(shape_[1]));
    std::size_t k = 0;
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = values_[k++];
    return m;
  }

  Vector to_vector() const {
    if (rank() != 1) throw Error(ErrorKind::ShapeMismatch, "tensor is not rank 1");
    return Eigen::Map<const Vector>(values_.data(), static_cast<Index>(values_.size()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  DType dtype_ = DType::f64;
  std::vector<double> values_;
};

/// Named tensors in insertion order plus free-form string metadata.
class TensorBundle {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor tensor) {
    if (name.empty()) throw Error(ErrorKind::InvalidTensor, "tensor name is empty");
    if (index_.contains(name)) throw Error(ErrorKind::InvalidTensor, "duplicate tensor name", name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
  }

  const Tensor& at(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw Error(ErrorKind::MissingTensor, "no such tensor", name);
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  std::map<std::string, std::string> metadata;

  friend bool operator==(const TensorBundle& a, const TensorBundle& b) {
    return a.entries_ == b.entries_ && a.metadata == b.metadata;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline constexpr std::array<char, 4> kMagic{'D', 'R', 'M', 'B'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kPreambleBytes = 4 + 4 + 8;
inline constexpr std::size_t kAlignment = 8;

inline std::size_t align_up(std::size_t x) noexcept {
  return (x + kAlignment - 1) / kAlignment * kAlignment;
}

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::string_view in, std::size_t at) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    value |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return value;
}

}  // namespace detail

/// Serialise a bundle to the DRMB byte layout.
inline std::string encode_bundle(const TensorBundle& bundle) {
  using nlohmann::json;
  json tensors = json::array();
  std::size_t cursor = 0;
  std::vector<std::size_t> offsets;
  offsets.reserve(bundle.size());
  for (const auto& [name, t] : bundle) {
    cursor = detail::align_up(cursor);
    offsets.push_back(cursor);
    tensors.push_back({{"name", name},
                       {"dtype", std::string(to_string(t.dtype()))},
                       {"shape", t.shape()},
                       {"offset", cursor},
                       {"nbytes", t.nbytes()}});
    cursor += t.nbytes();
  }
  json header = {{"tensors", std::move(tensors)}, {"metadata", json::object()}};
  for (const auto& [k, v] : bundle.metadata) header["metadata"][k] = v;
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(detail::kPreambleBytes + header_text.size() + cursor);
  out.append(detail::kMagic.data(), detail::kMagic.size());
  detail::put_le<std::uint32_t>(out, detail::kFormatVersion);
  detail::put_le<std::uint64_t>(out, header_text.size());
  out += header_text;

  const std::size_t data_start = out.size();
  out.resize(data_start + cursor, '\0');
  std::size_t k = 0;
  for (const auto& [name, t] : bundle) {
    std::size_t at = data_start + offsets[k++];
    for (double v : t.values()) {
      std::string bytes;
      if (t.dtype() == DType::f32) {
        detail::put_le(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        detail::put_le(bytes, std::bit_cast<std::uint64_t>(v));
      }
      std::memcpy(out.data() + at, bytes.data(), bytes.size());
      at += bytes.size();
    }
  }
  return out;
}

/// Parse DRMB bytes. Errors carry the offending tensor name where known.
inline TensorBundle decode_bundle(std::string_view bytes) {
  using nlohmann::json;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), detail::kMagic.data(), 4) != 0)
    throw Error(ErrorKind::BadMagic, "file does not start with DRMB");
  if (bytes.size() < detail::kPreambleBytes)
    throw Error(ErrorKind::CorruptHeader, "truncated preamble");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != detail::kFormatVersion)
    throw Error(ErrorKind::UnsupportedVersion, fmt::format("version {}", version));
  const auto header_len = detail::get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - detail::kPreambleBytes)
    throw Error(ErrorKind::CorruptHeader, "header length exceeds file size");

  const std::string_view header_text = bytes.substr(detail::kPreambleBytes, header_len);
  const std::string_view data = bytes.substr(detail::kPreambleBytes + header_len);

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, e.what());
  }

  TensorBundle bundle;
  try {
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array())
      throw Error(ErrorKind::CorruptHeader, "header has no tensors array");
    if (header.contains("metadata")) {
      const auto& meta = header["metadata"];
      if (!meta.is_object()) throw Error(ErrorKind::CorruptHeader, "metadata is not an object");
      for (const auto& [k, v] : meta.items()) {
        if (!v.is_string()) throw Error(ErrorKind::CorruptHeader, "metadata value is not a string", k);
        bundle.metadata.emplace(k, v.get<std::string>());
      }
    }

    for (const auto& entry : header["tensors"]) {
      if (!entry.is_object() || !entry.contains("name") || !entry["name"].is_string())
        throw Error(ErrorKind::CorruptHeader, "tensor entry without a name");
      const std::string name = entry["name"].get<std::string>();
      auto corrupt = [&](std::string_view why) {
        return Error(ErrorKind::CorruptHeader, std::string(why), name);
      };
      for (const char* key : {"dtype", "shape", "offset", "nbytes"})
        if (!entry.contains(key)) throw corrupt(fmt::format("missing field '{}'", key));
      if (!entry["dtype"].is_string()) throw corrupt("dtype is not a string");
      const auto dtype = parse_dtype(entry["dtype"].get<std::string>());
      if (!dtype) throw corrupt("unknown dtype");
      if (!entry["shape"].is_array()) throw corrupt("shape is not an array");
      std::vector<std::size_t> shape;
      for (const auto& e : entry["shape"]) {
        if (!e.is_number_unsigned() || e.get<std::uint64_t>() == 0)
          throw corrupt("shape extents must be positive integers");
        shape.push_back(e.get<std::size_t>());
      }
      if (shape.empty() || shape.size() > 2) throw corrupt("tensor rank must be 1 or 2");
      if (!entry["offset"].is_number_unsigned() || !entry["nbytes"].is_number_unsigned())
        throw corrupt("offset and nbytes must be non-negative integers");
      const auto offset = entry["offset"].get<std::uint64_t>();
      const auto nbytes = entry["nbytes"].get<std::uint64_t>();
      std::size_t numel = 1;
      for (auto e : shape) numel *= e;
      if (nbytes != numel * element_size(*dtype)) throw corrupt("nbytes does not match shape and dtype");
      if (offset % detail::kAlignment != 0) throw corrupt("offset is not 8-byte aligned");
      if (offset > data.size() || nbytes > data.size() - offset)
        throw Error(ErrorKind::OffsetOutOfRange,
                    fmt::format("[{}, {}) exceeds data region of {} bytes", offset, offset + nbytes,
                                data.size()),
                    name);

      std::vector<double> values(numel);
      const std::size_t width = element_size(*dtype);
      for (std::size_t i = 0; i < numel; ++i) {
        const std::size_t at = offset + i * width;
        values[i] = *dtype == DType::f32
                        ? static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(data, at)))
                        : std::bit_cast<double>(detail::get_le<std::uint64_t>(data, at));
        if (!std::isfinite(values[i]))
          throw Error(ErrorKind::NonFiniteValue, fmt::format("element {} is not finite", i), name);
      }
      try {
        bundle.add(name, Tensor(std::move(shape), *dtype, std::move(values)));
      } catch (const Error& e) {
        throw Error(ErrorKind::CorruptHeader, e.what(), name);
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::CorruptHeader, e.what());
  }
  return bundle;
}

inline TensorBundle read_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open for reading", path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::IoFailure, "read failed", path.string());
  return decode_bundle(bytes);
}

inline void write_bundle(const TensorBundle& bundle, const std::filesystem::path& path) {
  const std::string bytes = encode_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot open for writing", path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw Error(ErrorKind::IoFailure, "write failed", path.string());
}

// ---------------------------------------------------------------------------
// Deltas

/// Weight deltas of N tasks for one rank-2 tensor.
struct DeltaSet {
  std::string layer_name;
  Index rows = 0;
  Index cols = 0;
  std::vector<Matrix> deltas;
  std::vector<std::string> task_names;

  std::size_t num_tasks() const noexcept { return deltas.size(); }

  void validate() const {
    if (deltas.empty()) throw Error(ErrorKind::InvalidArgument, "delta set has no tasks", layer_name);
    if (task_names.size() != deltas.size())
      throw Error(ErrorKind::InvalidArgument, "task name count differs from delta count", layer_name);
    for (const auto& d : deltas)
      if (d.rows() != rows || d.cols() != cols)
        throw Error(ErrorKind::ShapeMismatch,
                    fmt::format("delta {}x{} differs from layer shape {}x{}", d.rows(), d.cols(), rows,
                                cols),
                    layer_name);
    for (std::size_t i = 0; i < task_names.size(); ++i)
      for (std::size_t j = i + 1; j < task_names.size(); ++j)
        if (task_names[i] == task_names[j])
          throw Error(ErrorKind::InvalidArgument, "duplicate task name " + task_names[i], layer_name);
  }

  static DeltaSet from(std::string layer, std::vector<Matrix> deltas,
                       std::vector<std::string> names = {}) {
    DeltaSet ds;
    ds.layer_name = std::move(layer);
    if (!deltas.empty()) {
      ds.rows = deltas.front().rows();
      ds.cols = deltas.front().cols();
    }
    if (names.empty())
      for (std::size_t t = 0; t < deltas.size(); ++t) names.push_back(fmt::format("task{}", t));
    ds.deltas = std::move(deltas);
    ds.task_names = std::move(names);
    ds.validate();
    return ds;
  }

  /// Same tasks with every delta transposed.
  DeltaSet transposed() const {
    DeltaSet out = *this;
    std::swap(out.rows, out.cols);
    for (auto& d : out.deltas) d.transposeInPlace();
    return out;
  }
};

/// A rank-1 tensor (bias, affine scale) routed to weighted averaging.
struct BiasEntry {
  std::string name;
  Vector base;
  std::vector<Vector> tasks;
};

using BiasGroup = std::vector<BiasEntry>;

struct DeltaExtraction {
  std::vector<DeltaSet> layers;
  BiasGroup biases;
};

/// Check that a task bundle carries exactly the base's tensor names and shapes.
inline void check_aligned(const TensorBundle& base, const TensorBundle& task) {
  for (const auto& [name, t] : base) {
    const Tensor* other = task.find(name);
    if (!other) throw Error(ErrorKind::MissingTensor, "task bundle lacks tensor", name);
    if (other->shape() != t.shape())
      throw Error(ErrorKind::ShapeMismatch, "task tensor shape differs from base", name);
  }
  for (const auto& [name, t] : task)
    if (!base.contains(name)) throw Error(ErrorKind::ExtraTensor, "tensor absent from base", name);
}

inline DeltaExtraction extract_deltas(const TensorBundle& base, std::span<const TensorBundle> tasks,
                                      std::vector<std::string> task_names = {}) {
  if (tasks.empty()) throw Error(ErrorKind::InvalidArgument, "no task bundles given");
  for (const auto& t : tasks) check_aligned(base, t);
  if (task_names.empty())
    for (std::size_t t = 0; t < tasks.size(); ++t) task_names.push_back(fmt::format("task{}", t));

  DeltaExtraction out;
  for (const auto& [name, tensor] : base) {
    if (tensor.rank() == 2) {
      const Matrix w0 = tensor.to_matrix();
      std::vector<Matrix> deltas;
      deltas.reserve(tasks.size());
      for (const auto& t : tasks) deltas.push_back(t.at(name).to_matrix() - w0);
      out.layers.push_back(DeltaSet::from(name, std::move(deltas), task_names));
    } else {
      BiasEntry entry{name, tensor.to_vector(), {}};
      for (const auto& t : tasks) entry.tasks.push_back(t.at(name).to_vector());
      out.biases.push_back(std::move(entry));
    }
  }
  return out;
}

/// Dense delta scale * up * down of a low-rank adapter pair.
inline Matrix materialize_low_rank(const Matrix& down, const Matrix& up, double scale) {
  if (up.cols() != down.rows())
    throw Error(ErrorKind::ShapeMismatch,
                fmt::format("adapter inner dimensions differ (up {}x{}, down {}x{})", up.rows(),
                            up.cols(), down.rows(), down.cols()));
  return scale * (up * down);
}

}  // namespace drm
