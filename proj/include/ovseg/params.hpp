#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ovseg/tensor.hpp"

namespace ovseg {

// Insertion-ordered collection of named tensors. Entries share storage with
// the tensors they were added from.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor t);
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;  // ConfigError if absent
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  // Entries whose name starts with `prefix`, keeping full names.
  ParamSet with_prefix(std::string_view prefix) const;
  // Adds every entry of `other` under `prefix + name`.
  void append(const ParamSet& other, std::string_view prefix = {});
  std::vector<Tensor> tensors() const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
};

// Byte image of an OVW1 weight file: "OVW1" followed by records of
// {u32 name_len, name, u32 rank, u32 dims..., f32 payload}, all little-endian.
std::vector<std::uint8_t> encode_ovw1(const ParamSet& params);
ParamSet decode_ovw1(std::span<const std::uint8_t> bytes);

void save_ovw1(const std::string& path, const ParamSet& params);
ParamSet load_ovw1(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace ovseg
