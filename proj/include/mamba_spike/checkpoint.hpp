#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mamba_spike/error.hpp"
#include "mamba_spike/tensor.hpp"

namespace mamba_spike {

// Checkpoint container (little-endian):
//   magic "MSCK" | version u32 = 1 | tensor count u32 | checksum u64
// followed per tensor by
//   name length u32 | name bytes | rank u32 | dims u64[rank] | f64 payload
// The checksum is FNV-1a 64 over every byte after the 20-byte header.

namespace detail {

inline std::uint64_t fnv1a(const std::string& bytes, std::size_t from) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = from; i < bytes.size(); ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 1099511628211ull;
  }
  return h;
}

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) buf.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline std::string serialize_checkpoint(const NamedTensors& tensors) {
  std::string buf = "MSCK";
  detail::put_u32(buf, 1);
  detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  detail::put_u64(buf, 0);  // checksum patched below
  for (const auto& [name, t] : tensors) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u64(buf, d);
    for (double v : t.data()) detail::put_u64(buf, std::bit_cast<std::uint64_t>(v));
  }
  const std::uint64_t sum = detail::fnv1a(buf, 20);
  for (int b = 0; b < 8; ++b) buf[12 + b] = static_cast<char>((sum >> (8 * b)) & 0xff);
  return buf;
}

inline NamedTensors parse_checkpoint(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 20 || bytes.substr(0, 4) != "MSCK") {
    throw FormatError(origin + ": not a checkpoint file (bad magic)");
  }
  auto u32_at = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[off + b]);
    return v;
  };
  auto u64_at = [&](std::size_t off) {
    std::uint64_t v = 0;
    for (int b = 7; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[off + b]);
    return v;
  };
  const std::uint32_t version = u32_at(4);
  if (version != 1) throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = u32_at(8);
  const std::uint64_t want_sum = u64_at(12);
  if (detail::fnv1a(bytes, 20) != want_sum) {
    throw FormatError(origin + ": checksum mismatch (corrupt checkpoint)");
  }
  NamedTensors out;
  std::size_t pos = 20;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw FormatError(origin + ": truncated checkpoint");
  };
  for (std::uint32_t i = 0; i < count; ++i) {
    need(4);
    const std::uint32_t name_len = u32_at(pos);
    pos += 4;
    need(name_len);
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    need(4);
    const std::uint32_t rank = u32_at(pos);
    pos += 4;
    need(8 * rank);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(u64_at(pos));
      pos += 8;
      n *= shape.back();
    }
    need(8 * n);
    std::vector<double> data(n);
    for (std::size_t j = 0; j < n; ++j) {
      data[j] = std::bit_cast<double>(u64_at(pos));
      pos += 8;
    }
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (pos != bytes.size()) throw FormatError(origin + ": trailing bytes after last tensor");
  return out;
}

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string buf = serialize_checkpoint(tensors);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path);
}

inline NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

/// Copies loaded tensors into the model's parameters by name. Any missing,
/// unexpected, or shape-mismatched tensor is collected and reported in one
/// structured error.
inline void apply_checkpoint(const NamedTensors& loaded, NamedTensors& params,
                             const std::string& origin = "<checkpoint>") {
  std::vector<std::string> problems;
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : loaded) by_name[name] = &t;
  for (auto& [name, param] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      problems.push_back("missing tensor \"" + name + "\"");
      continue;
    }
    if (it->second->shape() != param.shape()) {
      problems.push_back("tensor \"" + name + "\" has shape " + shape_str(it->second->shape()) +
                         ", model expects " + shape_str(param.shape()));
    }
    by_name.erase(it);
  }
  for (const auto& [name, t] : by_name) {
    problems.push_back("unexpected tensor \"" + name + "\"");
  }
  if (!problems.empty()) {
    std::string msg = origin + ": checkpoint does not match the configured model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointMismatch(msg, std::move(problems));
  }
  std::map<std::string, const Tensor*> src;
  for (const auto& [name, t] : loaded) src[name] = &t;
  for (auto& [name, param] : params) {
    param.mutable_data() = src[name]->data();
  }
}

}  // namespace mamba_spike
